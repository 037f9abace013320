//! Weight and architecture update rules of the bilevel search, including the
//! finite-difference approximation of the unrolled architecture gradient.

use crate::autodiff::{loss_and_gradient, Batch, ParamGroup, ParamSelector};
use crate::error::{Error, Result};
use crate::nas::{ArchitectureVariables, SearchSpace, Supernet, WeightParameters};
use crate::tensor::GradientVector;

/// Below this validation-gradient norm the correction term is skipped.
pub const MIN_DIRECTION_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParameters {
    /// Weight learning rate.
    pub xi: f64,
    /// Architecture learning rate.
    pub eta: f64,
    /// The finite-difference step is `fd_epsilon_scale / ||grad_W' L_val||`.
    pub fd_epsilon_scale: f64,
    pub second_order: bool,
}

impl Default for HyperParameters {
    fn default() -> Self {
        Self {
            xi: 0.05,
            eta: 0.05,
            fd_epsilon_scale: 0.01,
            second_order: true,
        }
    }
}

impl HyperParameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0 && self.eta >= 0.0 && self.xi.is_finite() && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rates must be finite and >= 0 (xi={}, eta={})",
                self.xi, self.eta
            )));
        }
        if !(self.fd_epsilon_scale > 0.0 && self.fd_epsilon_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "fd_epsilon_scale must be > 0 (got {})",
                self.fd_epsilon_scale
            )));
        }
        Ok(())
    }
}

/// How the finite-difference step is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdEpsilon {
    /// `scale / ||direction||`, so the perturbation has norm `scale`.
    Relative(f64),
    Absolute(f64),
}

/// Gradients of a loss with respect to both parameter collections.
pub trait Objective {
    type Data: ?Sized;

    fn grad_w(
        &self,
        data: &Self::Data,
        arch: &ArchitectureVariables,
        weights: &WeightParameters,
    ) -> Result<GradientVector>;

    fn grad_a(
        &self,
        data: &Self::Data,
        arch: &ArchitectureVariables,
        weights: &WeightParameters,
    ) -> Result<GradientVector>;
}

/// Mean cross-entropy of the supernet on a batch.
#[derive(Debug, Clone, Copy)]
pub struct SupernetObjective<'a> {
    pub space: &'a SearchSpace,
}

impl SupernetObjective<'_> {
    fn grad(
        &self,
        batch: &Batch,
        arch: &ArchitectureVariables,
        weights: &WeightParameters,
        group: ParamGroup,
    ) -> Result<GradientVector> {
        let net = Supernet {
            space: self.space,
            arch,
            weights,
        };
        Ok(loss_and_gradient(&net, batch, &ParamSelector::Group(group))?.1)
    }
}

impl Objective for SupernetObjective<'_> {
    type Data = Batch;

    fn grad_w(
        &self,
        data: &Batch,
        arch: &ArchitectureVariables,
        weights: &WeightParameters,
    ) -> Result<GradientVector> {
        self.grad(data, arch, weights, ParamGroup::Weights)
    }

    fn grad_a(
        &self,
        data: &Batch,
        arch: &ArchitectureVariables,
        weights: &WeightParameters,
    ) -> Result<GradientVector> {
        self.grad(data, arch, weights, ParamGroup::Arch)
    }
}

/// `W - xi * grad`.
pub fn weight_step(
    weights: &WeightParameters,
    grad: &GradientVector,
    xi: f64,
) -> Result<WeightParameters> {
    let mut out = weights.clone();
    out.axpy(-xi, grad)?;
    Ok(out)
}

/// One-step look-ahead `W' = W - xi * sum_k grad_W L(D_k^tr)`.
pub fn virtual_step(
    weights: &WeightParameters,
    sum_train_grads: &GradientVector,
    xi: f64,
) -> Result<WeightParameters> {
    weight_step(weights, sum_train_grads, xi)
}

/// `A - eta * H`.
pub fn arch_step(
    arch: &ArchitectureVariables,
    grad: &GradientVector,
    eta: f64,
) -> Result<ArchitectureVariables> {
    let mut out = arch.clone();
    out.axpy(-eta, grad)?;
    Ok(out)
}

/// Plain validation gradient with respect to the architecture.
pub fn arch_gradient_first_order<O: Objective>(
    obj: &O,
    val: &O::Data,
    arch: &ArchitectureVariables,
    weights: &WeightParameters,
) -> Result<GradientVector> {
    obj.grad_a(val, arch, weights)
}

/// `(grad_A L(A, W + eps v) - grad_A L(A, W - eps v)) / 2 eps`, the symmetric
/// difference estimate of the mixed second derivative applied to `v`.
pub fn fd_mixed_product<O: Objective>(
    obj: &O,
    data: &O::Data,
    arch: &ArchitectureVariables,
    weights: &WeightParameters,
    direction: &GradientVector,
    eps: f64,
) -> Result<GradientVector> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "fd epsilon {eps} must be > 0"
        )));
    }
    let w_plus = weight_step(weights, direction, -eps)?;
    let w_minus = weight_step(weights, direction, eps)?;
    let mut diff = obj.grad_a(data, arch, &w_plus)?;
    diff.axpy(-1.0, &obj.grad_a(data, arch, &w_minus)?)?;
    diff.scale_in_place(1.0 / (2.0 * eps));
    Ok(diff)
}

/// Result of the second-order architecture gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderGradient {
    pub gradient: GradientVector,
    /// The step used for `W+/W-`; `None` when the correction was skipped
    /// (`xi = 0` or a vanishing validation gradient).
    pub epsilon: Option<f64>,
}

/// `H = grad_A L(val, A, W') - xi/(2 eps) [grad_A L(tr, A, W+) - grad_A L(tr, A, W-)]`
/// with `W+- = W +- eps grad_W' L(val, A, W')`.
#[allow(clippy::too_many_arguments)]
pub fn arch_gradient_second_order<O: Objective>(
    obj: &O,
    val: &O::Data,
    train: &O::Data,
    arch: &ArchitectureVariables,
    weights: &WeightParameters,
    w_prime: &WeightParameters,
    xi: f64,
    fd_epsilon: FdEpsilon,
) -> Result<SecondOrderGradient> {
    let first = obj.grad_a(val, arch, w_prime)?;
    if xi == 0.0 {
        return Ok(SecondOrderGradient {
            gradient: first,
            epsilon: None,
        });
    }
    let direction = obj.grad_w(val, arch, w_prime)?;
    let norm = direction.l2_norm();
    let eps = match fd_epsilon {
        FdEpsilon::Relative(scale) => {
            if norm < MIN_DIRECTION_NORM {
                return Ok(SecondOrderGradient {
                    gradient: first,
                    epsilon: None,
                });
            }
            scale / norm
        }
        FdEpsilon::Absolute(eps) => eps,
    };
    let correction = fd_mixed_product(obj, train, arch, weights, &direction, eps)?;
    let mut gradient = first;
    gradient.axpy(-xi, &correction)?;
    Ok(SecondOrderGradient {
        gradient,
        epsilon: Some(eps),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{NamedTensors, Tensor};

    fn vec_params(name: &str, v: &[f64]) -> NamedTensors {
        let mut p = NamedTensors::new();
        p.insert(name, Tensor::vector(v.to_vec()));
        p
    }

    fn vals(p: &NamedTensors, name: &str) -> Vec<f64> {
        p.get(name).unwrap().data().to_vec()
    }

    /// `L = sum_i a_i w_i`.
    struct Bilinear;

    impl Objective for Bilinear {
        type Data = ();
        fn grad_w(&self, _: &(), a: &NamedTensors, _: &NamedTensors) -> Result<GradientVector> {
            Ok(vec_params("w", &vals(a, "a")))
        }
        fn grad_a(&self, _: &(), _: &NamedTensors, w: &NamedTensors) -> Result<GradientVector> {
            Ok(vec_params("a", &vals(w, "w")))
        }
    }

    /// `L = sum_i a_i w_i^4 / 4 + |w|^2 / 2`.
    struct Quartic;

    impl Objective for Quartic {
        type Data = ();
        fn grad_w(&self, _: &(), a: &NamedTensors, w: &NamedTensors) -> Result<GradientVector> {
            let (a, w) = (vals(a, "a"), vals(w, "w"));
            Ok(vec_params(
                "w",
                &a.iter()
                    .zip(&w)
                    .map(|(a, w)| a * w.powi(3) + w)
                    .collect::<Vec<_>>(),
            ))
        }
        fn grad_a(&self, _: &(), _: &NamedTensors, w: &NamedTensors) -> Result<GradientVector> {
            let w = vals(w, "w");
            Ok(vec_params(
                "a",
                &w.iter().map(|w| w.powi(4) / 4.0).collect::<Vec<_>>(),
            ))
        }
    }

    #[test]
    fn weight_step_arithmetic() {
        let w = vec_params("w", &[1.0, 1.0]);
        let g = vec_params("w", &[1.0, 1.0]);
        assert_eq!(weight_step(&w, &g, 0.0).unwrap(), w);
        let out = weight_step(&w, &g, 0.1).unwrap();
        assert_eq!(vals(&out, "w"), vec![0.9, 0.9]);
        assert!(weight_step(&w, &vec_params("v", &[1.0, 1.0]), 0.1).is_err());
        assert!(weight_step(&w, &vec_params("w", &[1.0]), 0.1).is_err());
    }

    #[test]
    fn sequential_steps_add_on_linear_loss() {
        // With a linear loss the gradient does not depend on W.
        let w = vec_params("w", &[0.3, -1.2, 2.0]);
        let g1 = vec_params("w", &[0.5, 0.25, -1.0]);
        let g2 = vec_params("w", &[-0.125, 2.0, 0.75]);
        let two = weight_step(&weight_step(&w, &g1, 0.1).unwrap(), &g2, 0.1).unwrap();
        let mut sum = g1.clone();
        sum.axpy(1.0, &g2).unwrap();
        let one = weight_step(&w, &sum, 0.1).unwrap();
        assert!(two.sup_distance(&one).unwrap() < 1e-15);
    }

    #[test]
    fn virtual_step_on_half_squared_norm() {
        // grad of |W|^2/2 is W.
        let w = vec_params("w", &[1.0, 1.0]);
        let wp = virtual_step(&w, &w, 0.1).unwrap();
        assert_eq!(vals(&wp, "w"), vec![0.9, 0.9]);
        assert_eq!(virtual_step(&w, &w, 0.0).unwrap(), w);
    }

    #[test]
    fn arch_step_arithmetic() {
        let a = vec_params("e0-1", &[0.0, 0.0]);
        let h = vec_params("e0-1", &[1.0, -1.0]);
        assert_eq!(
            vals(&arch_step(&a, &h, 0.5).unwrap(), "e0-1"),
            vec![-0.5, 0.5]
        );
        assert_eq!(arch_step(&a, &h, 0.0).unwrap(), a);
    }

    #[test]
    fn arch_steps_decrease_gradient_on_convex_quadratic() {
        // L(A) = sum c_i a_i^2 / 2 with c_i > 0.
        let c = [0.5, 2.0, 1.0, 3.0];
        let mut a = vec_params("e", &[1.0, -2.0, 0.5, 1.5]);
        let grad = |a: &NamedTensors| {
            vec_params(
                "e",
                &vals(a, "e")
                    .iter()
                    .zip(c)
                    .map(|(x, c)| c * x)
                    .collect::<Vec<_>>(),
            )
        };
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let g = grad(&a);
            let n = g.l2_norm();
            assert!(n < last);
            last = n;
            a = arch_step(&a, &g, 0.1).unwrap();
        }
    }

    #[test]
    fn bilinear_matches_unrolled_gradient() {
        // L_val(A, W - xi grad_W L_tr) = A (W - xi A)  =>  dA = W - 2 xi A.
        let (a0, w0, xi) = (0.7, -1.3, 0.2);
        let a = vec_params("a", &[a0]);
        let w = vec_params("w", &[w0]);
        let wp = virtual_step(&w, &Bilinear.grad_w(&(), &a, &w).unwrap(), xi).unwrap();
        let h = arch_gradient_second_order(
            &Bilinear,
            &(),
            &(),
            &a,
            &w,
            &wp,
            xi,
            FdEpsilon::Relative(0.01),
        )
        .unwrap();
        let want = w0 - 2.0 * xi * a0;
        assert!((vals(&h.gradient, "a")[0] - want).abs() < 1e-10);
    }

    #[test]
    fn zero_xi_collapses_to_validation_gradient() {
        let a = vec_params("a", &[0.3, -0.4]);
        let w = vec_params("w", &[1.5, 0.5]);
        let h = arch_gradient_second_order(
            &Quartic,
            &(),
            &(),
            &a,
            &w,
            &w,
            0.0,
            FdEpsilon::Relative(0.01),
        )
        .unwrap();
        assert_eq!(h.epsilon, None);
        assert_eq!(
            h.gradient,
            arch_gradient_first_order(&Quartic, &(), &a, &w).unwrap()
        );
    }

    #[test]
    fn stationary_validation_gradient_skips_correction() {
        // grad_W of Quartic at w = 0 is zero.
        let a = vec_params("a", &[0.3, -0.4]);
        let w = vec_params("w", &[0.0, 0.0]);
        let h = arch_gradient_second_order(
            &Quartic,
            &(),
            &(),
            &a,
            &w,
            &w,
            0.1,
            FdEpsilon::Relative(0.01),
        )
        .unwrap();
        assert_eq!(h.epsilon, None);
    }

    #[test]
    fn relative_epsilon_normalizes_the_perturbation() {
        let a = vec_params("a", &[0.3, -0.4]);
        let w = vec_params("w", &[1.5, 0.5]);
        let dir = Quartic.grad_w(&(), &a, &w).unwrap();
        let h = arch_gradient_second_order(
            &Quartic,
            &(),
            &(),
            &a,
            &w,
            &w,
            0.1,
            FdEpsilon::Relative(0.01),
        )
        .unwrap();
        assert!((h.epsilon.unwrap() * dir.l2_norm() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn fd_correction_error_is_second_order() {
        // grad_A L = w^4/4, so the exact mixed product with v is w^3 v and the
        // symmetric difference errs by w v^3 eps^2.
        let a = vec_params("a", &[0.3, -0.4]);
        let w = vec_params("w", &[1.5, 0.5]);
        let v = vec_params("w", &[0.8, -1.1]);
        let exact: Vec<f64> = vals(&w, "w")
            .iter()
            .zip(vals(&v, "w"))
            .map(|(w, v)| w.powi(3) * v)
            .collect();
        let err = |eps: f64| {
            let fd = fd_mixed_product(&Quartic, &(), &a, &w, &v, eps).unwrap();
            vals(&fd, "a")
                .iter()
                .zip(&exact)
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let (e1, e2, e3) = (err(1e-2), err(5e-3), err(2.5e-3));
        for order in [(e1 / e2).log2(), (e2 / e3).log2()] {
            assert!((1.8..=2.2).contains(&order), "order {order}");
        }
    }
}
