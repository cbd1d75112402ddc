//! Rough integrals by compensated Riemann sums, Riemann–Stieltjes sums and the
//! rough stochastic integral.
//!
//! An integrand `Y` takes values in `L(V; U)` (shape `U ++ [d]`) and its
//! Gubinelli derivative `Y′` has shape `U ++ [d, d]` with the `δX` slot last.
//! One step contributes `Y_k δX_k + Y′_k 𝕏_k`, where
//! `(Y′𝕏)[u] = Σ_{ij} Y′[u, j, i] 𝕏[i, j]`.

use crate::controlled::ControlledPath;
use crate::error::{shape_err, Result};
use crate::grid_paths::GridPath;
use crate::rough_lift::{MartingaleSample, RoughPath};
use crate::tensor::Tensor;

fn check_integrand(cp: &ControlledPath, rx: &RoughPath) -> Result<()> {
    if cp.grid() != rx.grid() {
        return shape_err("integrand and rough path live on different grids");
    }
    let ys = cp.y().shape();
    if ys.last() != Some(&rx.dim()) || cp.driver_dim() != rx.dim() {
        return shape_err(format!("integrand shape {ys:?} does not end in the driver dimension {}", rx.dim()));
    }
    Ok(())
}

fn rough_step(cp: &ControlledPath, rx: &RoughPath, k: usize) -> Result<Tensor> {
    let mut s = cp.y().value(k).contract(&rx.step(k), 1)?;
    s += &cp.yp().value(k).transpose_last2().contract(rx.area_step(k), 2)?;
    Ok(s)
}

/// `Σ_{k=i}^{j−1} Y_k δX_{k,k+1} + Y′_k 𝕏_{k,k+1}`.
pub fn rough_integral(cp: &ControlledPath, rx: &RoughPath, i: usize, j: usize) -> Result<Tensor> {
    check_integrand(cp, rx)?;
    rx.grid().check_pair(i, j)?;
    let mut acc = rough_step(cp, rx, i)?;
    for k in i + 1..j {
        acc += &rough_step(cp, rx, k)?;
    }
    Ok(acc)
}

/// Running rough integral `t_k ↦ ∫_0^{t_k} (Y, Y′) d𝐗`.
pub fn rough_integral_path(cp: &ControlledPath, rx: &RoughPath) -> Result<GridPath> {
    check_integrand(cp, rx)?;
    running(rx, |k| rough_step(cp, rx, k))
}

fn running(rx: &RoughPath, mut step: impl FnMut(usize) -> Result<Tensor>) -> Result<GridPath> {
    let g = *rx.grid();
    let mut values = Vec::with_capacity(g.n_nodes());
    let first = step(0)?;
    let mut acc = Tensor::zeros(first.shape());
    values.push(acc.clone());
    acc += &first;
    values.push(acc.clone());
    for k in 1..g.n_steps() {
        acc += &step(k)?;
        values.push(acc.clone());
    }
    GridPath::new(g, values)
}

/// Left-point Riemann–Stieltjes sums `Σ φ_k · δA_{k,k+1}` against a driver
/// of finite variation; `φ` has shape `U ++ shape(A)`.
pub fn rs_integral(phi: &GridPath, driver: &GridPath) -> Result<GridPath> {
    if phi.grid() != driver.grid() {
        return shape_err("rs_integral on different grids");
    }
    let ds = driver.shape();
    let ps = phi.shape();
    if ps.len() < ds.len() || ps[ps.len() - ds.len()..] != *ds {
        return shape_err(format!("integrand {ps:?} does not end in driver shape {ds:?}"));
    }
    let g = *phi.grid();
    let mut acc = Tensor::zeros(&ps[..ps.len() - ds.len()]);
    let mut values = Vec::with_capacity(g.n_nodes());
    values.push(acc.clone());
    for k in 0..g.n_steps() {
        acc += &phi.value(k).contract(&driver.step(k), ds.len())?;
        values.push(acc.clone());
    }
    GridPath::new(g, values)
}

fn martingale_as(m: &MartingaleSample, y: &GridPath) -> Result<GridPath> {
    if m.grid() != y.grid() {
        return shape_err("martingale and integrand live on different grids");
    }
    let shape = y.shape().to_vec();
    let n: usize = shape.iter().product();
    if m.dim() != n {
        return shape_err(format!("martingale has {} components, integrand has {n}", m.dim()));
    }
    m.path().map(|_, v| v.clone().reshape(shape.clone()).expect("sizes checked"))
}

/// Rough stochastic integral `∫(Y, ∂_X Y) d𝐗 = ∫(Y − M, ∂_X Y) d𝐗 + ∫M dX`.
///
/// `dy` is the Gubinelli derivative of `Y − M`. The martingale is given as
/// a vector sample whose components are the entries of `Y` in row-major
/// order. `∫M dX` is the grid IBP integral `M_s δX + Π(M; X)`, which on one
/// step equals `M_{k+1} δX_{k,k+1}`.
pub fn rough_stochastic_integral(y: &GridPath, dy: &GridPath, m: &MartingaleSample, rx: &RoughPath) -> Result<GridPath> {
    let mp = martingale_as(m, y)?;
    let cp = ControlledPath::new(y.sub(&mp)?, dy.clone())?;
    check_integrand(&cp, rx)?;
    running(rx, |k| {
        let mut s = rough_step(&cp, rx, k)?;
        s += &mp.value(k + 1).contract(&rx.step(k), 1)?;
        Ok(s)
    })
}

/// `max_t |I^τ_t − J_t|` where `I` is the rough stochastic integral frozen at
/// `stop_idx` and `J` is the rough stochastic integral of the stopped inputs
/// `Y^τ`, `(∂_X Y)^τ`, `M^τ`, `𝐗^τ`.
pub fn stopped_consistency_check(
    y: &GridPath,
    dy: &GridPath,
    m: &MartingaleSample,
    rx: &RoughPath,
    stop_idx: usize,
) -> Result<f64> {
    let g = *rx.grid();
    if stop_idx > g.n_steps() {
        return Err(crate::error::Error::Index(format!("stop index {stop_idx} beyond {}", g.n_steps())));
    }
    let full = rough_stochastic_integral(y, dy, m, rx)?.stopped(stop_idx);
    let frozen = rough_stochastic_integral(
        &y.stopped(stop_idx),
        &dy.stopped(stop_idx),
        &m.stopped(stop_idx)?,
        &rx.stopped(stop_idx)?,
    )?;
    Ok(full
        .values()
        .iter()
        .zip(frozen.values())
        .map(|(a, b)| (a - b).max_abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_paths::TimeGrid;
    use crate::rough_lift::{ibp_integral, sample_brownian, stratonovich_lift};

    fn brownian_rp(n: usize, d: usize, seed: u64) -> RoughPath {
        let g = TimeGrid::unit(1.0, n).unwrap();
        stratonovich_lift(&sample_brownian(g, d, seed).unwrap(), 4, seed).unwrap()
    }

    #[test]
    fn constant_integrand_gives_increment() {
        let rx = brownian_rp(32, 2, 1);
        let g = *rx.grid();
        let c = Tensor::matrix(1, 2, vec![0.5, -2.0]);
        let cp = ControlledPath::new(GridPath::constant(g, c.clone()), GridPath::zeros(g, &[1, 2, 2])).unwrap();
        let v = rough_integral(&cp, &rx, 3, 20).unwrap();
        let want = c.contract(&rx.increment(3, 20), 1).unwrap();
        assert!((&v - &want).max_abs() < 1e-14);
    }

    #[test]
    fn integral_of_x_against_x_is_the_area() {
        let rx = brownian_rp(64, 2, 2);
        let g = *rx.grid();
        // ∫ δX_{0,r} ⊗ dX_r: integrand values in L(V; V⊗V) flattened as (i, j) with dX slot last.
        for comp in 0..2 {
            let yc = rx.base().map(|_, v| {
                let dv = v - rx.base().value(0);
                Tensor::from_fn(&[2, 2], |ix| if ix[1] == comp { dv.data()[ix[0]] } else { 0.0 })
            });
            let ypc = GridPath::constant(
                g,
                Tensor::from_fn(&[2, 2, 2], |ix| if ix[1] == comp && ix[0] == ix[2] { 1.0 } else { 0.0 }),
            );
            let cp = ControlledPath::new(yc.unwrap(), ypc).unwrap();
            let v = rough_integral(&cp, &rx, 0, g.n_steps()).unwrap();
            let area = rx.area_at(0, g.n_steps()).unwrap();
            for i in 0..2 {
                let want: f64 = (0..2).map(|j| if j == comp { area.at(&[i, j]) } else { 0.0 }).sum();
                assert!((v.data()[i] - want).abs() < 1e-12, "{} vs {want}", v.data()[i]);
            }
        }
    }

    #[test]
    fn additivity_and_linearity() {
        let rx = brownian_rp(40, 2, 3);
        let g = *rx.grid();
        let y = GridPath::from_fn(g, |_, t| Tensor::vector(vec![t.sin(), t * t])).unwrap();
        let yp = GridPath::from_fn(g, |_, t| Tensor::matrix(2, 2, vec![t, 1.0, -t, 0.5])).unwrap();
        let cp = ControlledPath::new(y.clone(), yp.clone()).unwrap();
        let whole = rough_integral(&cp, &rx, 2, 37).unwrap();
        let split = &rough_integral(&cp, &rx, 2, 15).unwrap() + &rough_integral(&cp, &rx, 15, 37).unwrap();
        assert!((&whole - &split).max_abs() <= 1e-15 * whole.max_abs().max(1.0) * 8.0);
        let cp2 = ControlledPath::new(y.scale(2.0), yp.scale(2.0)).unwrap();
        let doubled = rough_integral(&cp2, &rx, 2, 37).unwrap();
        assert_eq!(doubled, whole.scale(2.0));
    }

    #[test]
    fn smooth_driver_converges_at_first_order() {
        // X = (t, t²/2), Y = f(X) = (cos X¹, X¹ X²) as an L(R²; R) integrand.
        // ∫ cos t dt + ∫ t · (t²/2) · t dt = sin 1 + 1/10.
        let exact = 1f64.sin() + 0.1;
        let mut errs = Vec::new();
        for n in [16usize, 32, 64, 128] {
            let g = TimeGrid::unit(1.0, n).unwrap();
            let base = GridPath::from_fn(g, |_, t| Tensor::vector(vec![t, 0.5 * t * t])).unwrap();
            let rx = RoughPath::piecewise_linear(0.5, base.clone()).unwrap();
            let y = base.map(|_, x| Tensor::vector(vec![x.data()[0].cos(), x.data()[0] * x.data()[1]])).unwrap();
            let yp = base
                .map(|_, x| {
                    let (a, b) = (x.data()[0], x.data()[1]);
                    Tensor::matrix(2, 2, vec![-a.sin(), 0.0, b, a])
                })
                .unwrap();
            let cp = ControlledPath::new(y, yp).unwrap();
            errs.push((rough_integral(&cp, &rx, 0, n).unwrap().item() - exact).abs());
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order > 0.9, "{errs:?}");
        }
    }

    #[test]
    fn rs_integral_examples() {
        let g = TimeGrid::unit(1.0, 100).unwrap();
        let t = GridPath::from_fn(g, |_, t| Tensor::vector(vec![t])).unwrap();
        let one = GridPath::constant(g, Tensor::vector(vec![1.0]));
        let i1 = rs_integral(&one, &t).unwrap();
        for k in 0..=100 {
            assert!((i1.value(k).item() - g.time(k)).abs() < 1e-14);
        }
        let half = rs_integral(&t, &t).unwrap().last().item();
        assert!((half - 0.5).abs() <= 0.01);
        assert!((half - 0.5).abs() > 0.0);
        let zero = rs_integral(&t, &GridPath::constant(g, Tensor::vector(vec![3.0]))).unwrap();
        assert_eq!(zero.last().item(), 0.0);
    }

    fn brownian_martingale(g: TimeGrid, seed: u64) -> MartingaleSample {
        let b = sample_brownian(g, 2, seed).unwrap();
        let phi = GridPath::from_fn(g, |_, t| Tensor::matrix(2, 2, vec![1.0, t, 0.0, 0.5])).unwrap();
        MartingaleSample::from_ito(&phi, &b).unwrap()
    }

    #[test]
    fn rsi_with_zero_martingale_is_the_rough_integral() {
        let rx = brownian_rp(32, 2, 5);
        let g = *rx.grid();
        let y = GridPath::from_fn(g, |_, t| Tensor::vector(vec![t.cos(), t])).unwrap();
        let dy = GridPath::from_fn(g, |_, t| Tensor::matrix(2, 2, vec![t, 0.0, 1.0, t])).unwrap();
        let rsi = rough_stochastic_integral(&y, &dy, &MartingaleSample::zero(g, 2), &rx).unwrap();
        let ri = rough_integral_path(&ControlledPath::new(y, dy).unwrap(), &rx).unwrap();
        for k in 0..=g.n_steps() {
            assert_eq!(rsi.value(k), ri.value(k));
        }
    }

    #[test]
    fn rsi_of_martingale_is_the_ibp_integral() {
        let rx = brownian_rp(32, 2, 6);
        let g = *rx.grid();
        let m = brownian_martingale(g, 7);
        let rsi = rough_stochastic_integral(m.path(), &GridPath::zeros(g, &[2, 2]), &m, &rx).unwrap();
        let pmx = ibp_integral(m.path(), rx.base()).unwrap();
        for j in [5usize, 17, 32] {
            let pi = pmx.value(0, j).unwrap();
            let trace: f64 = (0..2).map(|i| pi.at(&[i, i])).sum();
            let want = m.path().value(0).contract(&rx.increment(0, j), 1).unwrap().item() + trace;
            assert!((rsi.value(j).item() - want).abs() < 1e-12);
        }
    }

    /// `∫ M dX` on `[0, t_k]` through integration by parts,
    /// `δ(M·X) − Σ δM_{m,m+1} · X_m`.
    fn ibp_martingale_part(mp: &GridPath, x: &GridPath) -> Result<GridPath> {
        let g = *x.grid();
        let x0 = x.value(0);
        let mx0 = mp.value(0).contract(x0, 1)?;
        let mut ito = Tensor::zeros(mx0.shape());
        let mut values = Vec::with_capacity(g.n_nodes());
        values.push(Tensor::zeros(mx0.shape()));
        for k in 0..g.n_steps() {
            ito += &mp.step(k).contract(x.value(k), 1)?;
            let prod = mp.value(k + 1).contract(x.value(k + 1), 1)?;
            values.push(&(&prod - &mx0) - &ito);
        }
        GridPath::new(g, values)
    }

    #[test]
    fn martingale_part_matches_integration_by_parts() {
        let rx = brownian_rp(48, 2, 8);
        let g = *rx.grid();
        let m = brownian_martingale(g, 9);
        let rsi = rough_stochastic_integral(m.path(), &GridPath::zeros(g, &[2, 2]), &m, &rx).unwrap();
        let ibp = ibp_martingale_part(m.path(), rx.base()).unwrap();
        for k in 0..=g.n_steps() {
            assert!((rsi.value(k) - ibp.value(k)).max_abs() < 1e-12);
        }
    }

    #[test]
    fn stopped_consistency_is_algebraic() {
        for seed in 0..100u64 {
            let rx = brownian_rp(24, 2, 100 + seed);
            let g = *rx.grid();
            let m = brownian_martingale(g, 200 + seed);
            let y = m.path().add(&GridPath::from_fn(g, |_, t| Tensor::vector(vec![t.sin(), 1.0])).unwrap()).unwrap();
            let dy = GridPath::from_fn(g, |_, t| Tensor::matrix(2, 2, vec![t.cos(), 0.0, 0.0, 0.0])).unwrap();
            let tau = (seed as usize * 7) % 25;
            let r = stopped_consistency_check(&y, &dy, &m, &rx, tau).unwrap();
            assert!(r <= 1e-14, "seed {seed}, tau {tau}: {r}");
            if seed == 0 {
                assert_eq!(stopped_consistency_check(&y, &dy, &m, &rx, 0).unwrap(), 0.0);
                assert_eq!(stopped_consistency_check(&y, &dy, &m, &rx, g.n_steps()).unwrap(), 0.0);
            }
        }
    }
}
