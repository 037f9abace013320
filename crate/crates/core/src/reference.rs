//! Single-process search on pooled data, without privacy or parties.

use crate::autodiff::Batch;
use crate::bilevel::{
    arch_gradient_first_order, arch_gradient_second_order, arch_step, weight_step, FdEpsilon,
    HyperParameters, Objective, SupernetObjective,
};
use crate::error::Result;
use crate::nas::{ArchitectureVariables, SearchSpace, WeightParameters};

/// Alternating full-batch steps: `W <- W - xi grad_W L(train)`, then
/// `A <- A - eta H` with `H` taken at the updated weights. Returns `(A, W)`
/// after every iteration.
pub fn centralized_search(
    space: &SearchSpace,
    hyper: &HyperParameters,
    train: &Batch,
    val: &Batch,
    mut arch: ArchitectureVariables,
    mut weights: WeightParameters,
    iterations: u64,
) -> Result<Vec<(ArchitectureVariables, WeightParameters)>> {
    hyper.validate()?;
    let obj = SupernetObjective { space };
    let mut out = Vec::with_capacity(iterations as usize);
    for _ in 0..iterations {
        let g = obj.grad_w(train, &arch, &weights)?;
        let w_prime = weight_step(&weights, &g, hyper.xi)?;
        let h = if hyper.second_order {
            arch_gradient_second_order(
                &obj,
                val,
                train,
                &arch,
                &weights,
                &w_prime,
                hyper.xi,
                FdEpsilon::Relative(hyper.fd_epsilon_scale),
            )?
            .gradient
        } else {
            arch_gradient_first_order(&obj, val, &arch, &w_prime)?
        };
        arch = arch_step(&arch, &h, hyper.eta)?;
        weights = w_prime;
        out.push((arch.clone(), weights.clone()));
    }
    Ok(out)
}
