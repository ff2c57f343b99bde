use crate::autodiff::{Group, ParamId, ParamStore};
use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Momentum buffers, indexed like the parameter store.
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let velocity = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).tensor.shape().to_vec()))
            .collect();
        SgdState { velocity }
    }
}

fn decay_for<T: Real>(store: &ParamStore<T>, id: ParamId, cfg: &OptimConfig) -> f64 {
    match store.get(id).group {
        Group::SimHead if !cfg.decay_sim_heads => 0.0,
        _ => cfg.weight_decay,
    }
}

/// `g + wd·θ` per parameter: the quantity the update actually follows.
pub fn coupled_grads<T: Real>(store: &ParamStore<T>, grads: &[Tensor<T>], cfg: &OptimConfig) -> Vec<Tensor<T>> {
    store
        .ids()
        .zip(grads)
        .map(|(id, g)| {
            let wd = T::lit(decay_for(store, id, cfg));
            let theta = store.get(id).tensor.data();
            let data = g.data().iter().zip(theta).map(|(&g, &t)| g + wd * t).collect();
            Tensor::new(g.shape().to_vec(), data).expect("same shape")
        })
        .collect()
}

/// v ← momentum·v + g + wd·θ; θ ← θ − lr·v, visiting parameters by name.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient leaves both parameters and state untouched.
pub fn sgd_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    lr: f64,
    cfg: &OptimConfig,
    state: &mut SgdState<T>,
) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} momentum buffers for {} parameters",
            grads.len(),
            state.velocity.len(),
            store.len()
        )));
    }
    let order: Vec<_> = store.ids_by_name().collect();
    for &id in &order {
        let p = store.get(id);
        let g = &grads[id.0];
        if g.shape() != p.tensor.shape() {
            return Err(Error::Dimension(format!(
                "gradient of {} has shape {:?}, parameter {:?}",
                p.name,
                g.shape(),
                p.tensor.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {}", p.name)));
        }
    }
    let (m, lr) = (T::lit(cfg.momentum), T::lit(lr));
    for id in order {
        let wd = T::lit(decay_for(store, id, cfg));
        let v = state.velocity[id.0].data_mut();
        let theta = store.get_mut(id).tensor.data_mut();
        for ((v, t), &g) in v.iter_mut().zip(theta.iter_mut()).zip(grads[id.0].data()) {
            *v = m * *v + g + wd * *t;
            *t = *t - lr * *v;
        }
    }
    Ok(())
}

/// Euclidean norm of all gradients, accumulated in f64 in name order.
pub fn grad_global_norm<T: Real>(store: &ParamStore<T>, grads: &[Tensor<T>]) -> f64 {
    store
        .ids_by_name()
        .flat_map(|id| grads[id.0].data().iter())
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// `beta·prev + (1−beta)·value`; the first observation (`prev = None`)
/// initializes the average.
pub fn ema_update(prev: Option<f64>, value: f64, beta: f64) -> f64 {
    match prev {
        None => value,
        Some(p) => beta * p + (1.0 - beta) * value,
    }
}
