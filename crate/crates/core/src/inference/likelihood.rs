use super::Dataset;
use crate::model::{QuantileCurve, QuantileModel};

/// Rows of one site, packed for the likelihood loop.
#[derive(Debug, Clone, Default)]
pub(crate) struct SiteRows {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub(crate) fn pack_by_site(data: &Dataset) -> Vec<SiteRows> {
    let mut out = vec![SiteRows::default(); data.n_sites()];
    for r in 0..data.len() {
        let s = &mut out[data.site(r)];
        s.x.extend_from_slice(data.x(r));
        s.y.push(data.y(r));
    }
    out
}

/// `ln f(y)`, with `−∞` for points outside the support or on a flat
/// stretch of the quantile function.
pub(crate) fn log_density(curve: &QuantileCurve<'_>, y: f64) -> f64 {
    match curve.density_with_tau(y, None) {
        Ok((d, _)) if d > 0.0 && d.is_finite() => d.ln(),
        _ => f64::NEG_INFINITY,
    }
}

/// Log likelihood of the rows of one site, summed in row order.
pub(crate) fn site_log_likelihood(
    model: &QuantileModel,
    site: usize,
    rows: &SiteRows,
    curve: &mut QuantileCurve<'_>,
) -> f64 {
    let p = model.n_predictors();
    let mut acc = 0.0;
    for (i, &y) in rows.y.iter().enumerate() {
        model.fill_curve(curve, site, &rows.x[i * p..(i + 1) * p]);
        let ld = log_density(curve, y);
        if ld == f64::NEG_INFINITY {
            return ld;
        }
        acc += ld;
    }
    acc
}

/// `Σ_i ln f(y_i | s_i, x_i)`; `−∞` if any observation lies outside the
/// model's support.
pub fn log_likelihood(model: &QuantileModel, data: &Dataset) -> f64 {
    let packed = pack_by_site(data);
    let mut curve = QuantileCurve::new(model.basis(), Vec::new(), 0.0, 0.0, 0.0, 0.0);
    let mut acc = 0.0;
    for (s, rows) in packed.iter().enumerate() {
        if s >= model.n_sites() {
            return f64::NEG_INFINITY;
        }
        acc += site_log_likelihood(model, s, rows, &mut curve);
    }
    acc
}
