//! Multiplication-count cost model and acceleration planning.
//!
//! Costs count one MUL per multiply-accumulate:
//!
//! * original layer: `m²·p²·M·N`
//! * VQ path: `m²·N·K_vq`
//! * DL path: `m²·(N·L_dl + α·S·K_dl)`
//!
//! Planning fixes `K_vq` from the target ratio, sets `K_dl = c·K_vq` and takes
//! the largest dictionary that keeps the DL path within the VQ budget. All
//! real-valued quantities are floored.

use num_rational::Ratio;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{LayerShape, SubspacePartition};

/// `m²p²MN`
pub fn cost_original(shape: &LayerShape) -> u64 {
    let m = shape.input_side as u64;
    let p = shape.kernel_side as u64;
    m * m * p * p * shape.kernels as u64 * shape.channels as u64
}

/// `m²·N·K_vq`
pub fn cost_vq(shape: &LayerShape, nprime: usize, k_vq: usize) -> Result<u64> {
    SubspacePartition::with_dim(shape.channels, nprime)?;
    let m = shape.input_side as u64;
    Ok(m * m * shape.channels as u64 * k_vq as u64)
}

/// `m²·(N·L_dl + α·S·K_dl)`
pub fn cost_dl(
    shape: &LayerShape,
    nprime: usize,
    k_dl: usize,
    l_dl: usize,
    alpha: usize,
) -> Result<u64> {
    let part = SubspacePartition::with_dim(shape.channels, nprime)?;
    let m = shape.input_side as u64;
    let n = shape.channels as u64;
    let s = part.count() as u64;
    Ok(m * m * (n * l_dl as u64 + alpha as u64 * s * k_dl as u64))
}

/// Exact costs and acceleration ratios for one plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub t_original: u64,
    pub t_vq: u64,
    pub t_dl: u64,
    pub rho_vq: Ratio<u64>,
    pub rho_dl: Ratio<u64>,
}

impl CostReport {
    pub fn new(t_original: u64, t_vq: u64, t_dl: u64) -> Self {
        Self {
            t_original,
            t_vq,
            t_dl,
            rho_vq: Ratio::new(t_original, t_vq),
            rho_dl: Ratio::new(t_original, t_dl),
        }
    }
}

pub fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

impl Serialize for CostReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("CostReport", 7)?;
        s.serialize_field("T_o", &self.t_original)?;
        s.serialize_field("T_vq", &self.t_vq)?;
        s.serialize_field("T_dl", &self.t_dl)?;
        s.serialize_field("rho_vq", &ratio_f64(self.rho_vq))?;
        s.serialize_field("rho_dl", &ratio_f64(self.rho_dl))?;
        s.serialize_field(
            "rho_vq_exact",
            &[*self.rho_vq.numer(), *self.rho_vq.denom()],
        )?;
        s.serialize_field(
            "rho_dl_exact",
            &[*self.rho_dl.numer(), *self.rho_dl.denom()],
        )?;
        s.end()
    }
}

/// Parameters for both methods at one target acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccelPlan {
    pub shape: LayerShape,
    #[serde(rename = "Nprime")]
    pub nprime: usize,
    #[serde(rename = "S")]
    pub subspaces: usize,
    #[serde(rename = "K_vq")]
    pub k_vq: usize,
    pub c: f64,
    #[serde(rename = "K_dl")]
    pub k_dl: usize,
    #[serde(rename = "L_dl")]
    pub l_dl: usize,
    pub alpha: usize,
    pub rho_target: f64,
    pub cost: CostReport,
}

/// floor() that forgives representation error just under an integer.
fn floor_tolerant(x: f64) -> f64 {
    (x * (1.0 + 1e-12)).floor()
}

pub fn plan(
    shape: &LayerShape,
    nprime: usize,
    rho_target: f64,
    c: f64,
    alpha: usize,
) -> Result<AccelPlan> {
    shape.validate()?;
    if !(rho_target > 1.0) || !rho_target.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "target acceleration must be > 1, got {rho_target}"
        )));
    }
    if !(c >= 1.0) || !c.is_finite() {
        return Err(Error::InvalidParameter(format!("c must be >= 1, got {c}")));
    }
    let part = SubspacePartition::with_dim(shape.channels, nprime)?;
    let product = alpha as f64 * c;
    if product >= nprime as f64 {
        return Err(Error::InfeasibleSparsity { product, nprime });
    }
    let factor = 1.0 - product / nprime as f64;
    let cols = shape.columns();
    let k_vq = (floor_tolerant(cols as f64 / rho_target) as usize).max(1);
    let k_dl = (floor_tolerant(c * k_vq as f64) as usize).clamp(1, cols);
    let l_raw = k_vq as f64 * factor;
    let mut l_dl = floor_tolerant(l_raw) as usize;
    if l_dl < 1 {
        return Err(Error::DictionaryTooSmall(l_raw));
    }
    let t_vq = cost_vq(shape, nprime, k_vq)?;
    while l_dl > 1 && cost_dl(shape, nprime, k_dl, l_dl, alpha)? > t_vq {
        l_dl -= 1;
    }
    let t_dl = cost_dl(shape, nprime, k_dl, l_dl, alpha)?;
    if t_dl > t_vq {
        return Err(Error::DictionaryTooSmall(l_raw));
    }
    Ok(AccelPlan {
        shape: *shape,
        nprime,
        subspaces: part.count(),
        k_vq,
        c,
        k_dl,
        l_dl,
        alpha,
        rho_target,
        cost: CostReport::new(cost_original(shape), t_vq, t_dl),
    })
}

impl AccelPlan {
    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let rows = [
            ("shape (MxNxpxm)", self.shape.to_string()),
            ("N'", self.nprime.to_string()),
            ("S", self.subspaces.to_string()),
            ("target rho", self.rho_target.to_string()),
            ("c", self.c.to_string()),
            ("alpha", self.alpha.to_string()),
            ("K_vq", self.k_vq.to_string()),
            ("K_dl", self.k_dl.to_string()),
            ("L_dl", self.l_dl.to_string()),
            ("T_o", self.cost.t_original.to_string()),
            ("T_vq", self.cost.t_vq.to_string()),
            ("T_dl", self.cost.t_dl.to_string()),
            ("rho_vq", format!("{:.4}", ratio_f64(self.cost.rho_vq))),
            ("rho_dl", format!("{:.4}", ratio_f64(self.cost.rho_dl))),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<16} {v}\n"));
        }
        out
    }
}

fn prepare_curve(points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter(
            "an error curve needs at least two points".into(),
        ));
    }
    if points
        .iter()
        .any(|&(r, e)| !(r > 0.0) || !r.is_finite() || !e.is_finite())
    {
        return Err(Error::InvalidParameter(
            "curve points must have finite rho > 0 and finite error".into(),
        ));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted
        .windows(2)
        .any(|w| !(w[1].1 > w[0].1) || w[1].0 == w[0].0)
    {
        return Err(Error::InvalidParameter(
            "error must increase strictly with rho".into(),
        ));
    }
    Ok(sorted)
}

/// Acceleration at error `e`, interpolating error linearly in `ln rho`.
fn rho_at(curve: &[(f64, f64)], e: f64) -> f64 {
    let seg = curve
        .windows(2)
        .find(|w| e <= w[1].1)
        .unwrap_or(&curve[curve.len() - 2..]);
    let (r0, e0) = seg[0];
    let (r1, e1) = seg[1];
    let t = ((e - e0) / (e1 - e0)).clamp(0.0, 1.0);
    (r0.ln() + t * (r1.ln() - r0.ln())).exp()
}

/// Relative acceleration of the DL curve over the VQ curve at equal error,
/// `100·(ρ_dl/ρ_vq − 1)`, on the error levels of both curves that fall in their
/// overlap. Curves are `(rho, error)` points.
pub fn gain_at_equal_error(
    curve_vq: &[(f64, f64)],
    curve_dl: &[(f64, f64)],
) -> Result<Vec<(f64, f64)>> {
    let vq = prepare_curve(curve_vq)?;
    let dl = prepare_curve(curve_dl)?;
    let lo = vq[0].1.max(dl[0].1);
    let hi = vq[vq.len() - 1].1.min(dl[dl.len() - 1].1);
    if lo > hi {
        return Err(Error::NonOverlappingCurves);
    }
    let mut grid: Vec<f64> = vq
        .iter()
        .chain(&dl)
        .map(|&(_, e)| e)
        .filter(|&e| e >= lo && e <= hi)
        .chain([lo, hi])
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid
        .into_iter()
        .map(|e| (e, 100.0 * (rho_at(&dl, e) / rho_at(&vq, e) - 1.0)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_layer_costs_one() {
        let s = LayerShape::new(1, 1, 1, 1).unwrap();
        assert_eq!(cost_original(&s), 1);
    }

    #[test]
    fn small_layer_costs() {
        let s = LayerShape::new(8, 16, 3, 4).unwrap();
        assert_eq!(cost_original(&s), 18432);
        assert_eq!(cost_vq(&s, 8, 10).unwrap(), 2560);
        assert_eq!(cost_dl(&s, 8, 30, 4, 2).unwrap(), 2944);
        assert_eq!(cost_dl(&s, 8, 30, 4, 0).unwrap(), 16 * 16 * 4);
        assert!(matches!(
            cost_vq(&s, 5, 10),
            Err(Error::NonDivisibleChannels { .. })
        ));
    }

    #[test]
    fn vgg16_conv_total() {
        // (M, N, m) for the 13 conv layers at 224x224 input
        let layers = [
            (64, 3, 224),
            (64, 64, 224),
            (128, 64, 112),
            (128, 128, 112),
            (256, 128, 56),
            (256, 256, 56),
            (256, 256, 56),
            (512, 256, 28),
            (512, 512, 28),
            (512, 512, 28),
            (512, 512, 14),
            (512, 512, 14),
            (512, 512, 14),
        ];
        let total: u64 = layers
            .iter()
            .map(|&(m, n, side)| cost_original(&LayerShape::new(m, n, 3, side).unwrap()))
            .sum();
        let reference = 15.5e9;
        assert!(
            (total as f64 - reference).abs() / reference < 0.05,
            "{total}"
        );
        assert!(total as f64 > 0.99 * 15.3e9);
    }

    #[test]
    fn vgg_conv4_1_plan() {
        let s = LayerShape::new(512, 256, 3, 14).unwrap();
        let p = plan(&s, 8, 20.0, 3.0, 2).unwrap();
        assert_eq!((p.k_vq, p.k_dl, p.l_dl), (230, 690, 57));
        assert!(p.cost.t_dl <= p.cost.t_vq);
        assert_eq!(p.cost.rho_vq, Ratio::new(4608, 230));
    }

    #[test]
    fn infeasible_sparsity() {
        let s = LayerShape::new(512, 256, 3, 14).unwrap();
        assert!(matches!(
            plan(&s, 8, 20.0, 4.0, 2),
            Err(Error::InfeasibleSparsity { .. })
        ));
        assert!(plan(&s, 8, 20.0, 3.0, 3).is_err());
        assert!(plan(&s, 8, 1.0, 3.0, 2).is_err());
    }

    #[test]
    fn degenerate_plan_matches_vq() {
        let s = LayerShape::new(64, 64, 3, 8).unwrap();
        let p = plan(&s, 8, 8.0, 1.0, 0).unwrap();
        assert_eq!(p.l_dl, p.k_vq);
        assert_eq!(p.cost.t_dl, p.cost.t_vq);
    }

    #[test]
    fn tiny_dictionary_rejected() {
        let s = LayerShape::new(4, 8, 1, 4).unwrap();
        assert!(matches!(
            plan(&s, 8, 4.0, 3.0, 2),
            Err(Error::DictionaryTooSmall(_))
        ));
    }

    #[test]
    fn identical_curves_have_zero_gain() {
        let c = [(2.0, 0.1), (4.0, 0.2), (8.0, 0.35)];
        let g = gain_at_equal_error(&c, &c).unwrap();
        assert_eq!(g.len(), 3);
        assert!(g.iter().all(|&(_, gain)| gain.abs() < 1e-12));
    }

    #[test]
    fn doubled_rho_is_hundred_percent() {
        let vq = [(2.0, 0.1), (4.0, 0.2), (8.0, 0.35)];
        let dl: Vec<_> = vq.iter().map(|&(r, e)| (2.0 * r, e)).collect();
        let g = gain_at_equal_error(&vq, &dl).unwrap();
        assert!(g.iter().all(|&(_, gain)| (gain - 100.0).abs() < 1e-9));
    }

    #[test]
    fn two_point_curves_by_hand() {
        let vq = [(2.0, 0.1), (8.0, 0.3)];
        let dl = [(3.0, 0.1), (12.0, 0.4)];
        let g = gain_at_equal_error(&vq, &dl).unwrap();
        assert_eq!(g.len(), 2);
        assert!((g[0].0 - 0.1).abs() < 1e-15 && (g[0].1 - 50.0).abs() < 1e-9);
        let expected = 100.0 * (3.0 * 4f64.powf(2.0 / 3.0) / 8.0 - 1.0);
        assert!((g[1].0 - 0.3).abs() < 1e-15 && (g[1].1 - expected).abs() < 1e-9);
    }

    #[test]
    fn disjoint_curves_rejected() {
        let vq = [(2.0, 0.5), (8.0, 0.6)];
        let dl = [(2.0, 0.1), (8.0, 0.2)];
        assert!(matches!(
            gain_at_equal_error(&vq, &dl),
            Err(Error::NonOverlappingCurves)
        ));
        assert!(gain_at_equal_error(&vq[..1], &dl).is_err());
    }
}
