pub const METRICS_HEADER: &str = "epoch,phase,loss_total,loss_ce,loss_align,loss_uniform,loss_kd,eval_acc,seconds";

/// One metrics row. Loss columns are sample-weighted epoch means; terms
/// that are switched off are reported as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: String,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_align: f64,
    pub loss_uniform: f64,
    pub loss_kd: f64,
    pub eval_acc: f64,
    /// Cumulative phase cost at the end of the epoch.
    pub seconds: f64,
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros dropped,
/// exponent form outside `[1e-4, 1e9)`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    // the exponent after rounding to 9 digits decides the form
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let fields = [
            r.loss_total,
            r.loss_ce,
            r.loss_align,
            r.loss_uniform,
            r.loss_kd,
            r.eval_acc,
            r.seconds,
        ];
        out.push_str(&r.epoch.to_string());
        out.push(',');
        out.push_str(&r.phase);
        for v in fields {
            out.push(',');
            out.push_str(&format_sig9(v));
        }
        out.push('\n');
    }
    out
}
