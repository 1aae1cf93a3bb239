use crate::error::{Error, Result};
use crate::tensor::{ParamGrads, ParamGroup, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay for the default parameter group.
    pub weight_decay: f64,
    pub gat_weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            gat_weight_decay: 0.2,
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.entries().iter().map(|e| e.value.len()).collect();
        AdamW {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.index()], &self.v[id.index()])
    }
}

/// One AdamW update with decoupled weight decay:
/// `theta -= lr * wd * theta`, then `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
/// Parameters without a gradient are still decayed.
pub fn adamw_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut AdamW, lr: f64, p: &AdamWParams) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape("adamw_step", "optimizer state does not match the parameter store"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - p.beta1.powi(t);
    let bc2 = 1.0 - p.beta2.powi(t);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let entry = store.entry(id);
        if !entry.trainable {
            continue;
        }
        let wd = match entry.group {
            ParamGroup::Gat => p.gat_weight_decay,
            ParamGroup::Default => p.weight_decay,
        };
        let k = id.index();
        let g: Option<&Tensor> = grads.get(id);
        if let Some(g) = g {
            if g.shape() != entry.value.shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("gradient {:?} for parameter `{}` {:?}", g.shape(), entry.name, entry.value.shape()),
                ));
            }
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let theta = store.get_mut(id).data_mut();
        for (i, th) in theta.iter_mut().enumerate() {
            let mut x = *th as f64;
            x -= lr * wd * x;
            let gi = g.map_or(0.0, |g| g.data()[i] as f64);
            m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * gi;
            v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            x -= lr * mh / (vh.sqrt() + p.eps);
            *th = x as f32;
        }
    }
    Ok(())
}
