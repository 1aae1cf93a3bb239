//! PointNet segmentation network adapted to per-event features.

use rand_chacha::ChaCha8Rng;

use super::{repeat_row, MlpBlock};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Session, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointNetVariant {
    /// 128-d per-event and 1024-d global vectors.
    Standard,
    /// Per-event vectors raised to 1024-d as well.
    Adapted,
}

#[derive(Clone, Debug)]
pub struct PointNet {
    pub local: MlpBlock,
    pub global: MlpBlock,
    pub head: MlpBlock,
    pub variant: PointNetVariant,
}

impl PointNet {
    pub const GLOBAL_DIM: usize = 1024;

    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        variant: PointNetVariant,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let local_dim = match variant {
            PointNetVariant::Standard => 128,
            PointNetVariant::Adapted => Self::GLOBAL_DIM,
        };
        Self::with_widths(store, name, &[d_in, 64, local_dim], Self::GLOBAL_DIM, &[256, 128], variant, rng)
    }

    /// Custom widths: `local = [d_in, .., l]`, global `l -> global_dim`,
    /// head `l + global_dim -> head[0] -> ..`.
    pub fn with_widths(
        store: &mut ParamStore,
        name: &str,
        local: &[usize],
        global_dim: usize,
        head: &[usize],
        variant: PointNetVariant,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if local.len() < 2 || head.is_empty() || global_dim == 0 {
            return Err(Error::Config("PointNet needs at least one local layer, a global width and a head".into()));
        }
        let local_dim = local[local.len() - 1];
        let local = MlpBlock::new(store, &format!("{name}.local"), local, rng)?;
        let global = MlpBlock::new(store, &format!("{name}.global"), &[local_dim, global_dim], rng)?;
        let head_dims: Vec<usize> = std::iter::once(local_dim + global_dim).chain(head.iter().copied()).collect();
        let head = MlpBlock::new(store, &format!("{name}.seg"), &head_dims, rng)?;
        Ok(PointNet {
            local,
            global,
            head,
            variant,
        })
    }

    /// Width of the per-event vector after concatenating the global one.
    pub fn concat_width(&self) -> usize {
        self.local.d_out() + self.global.d_out()
    }

    pub fn d_out(&self) -> usize {
        self.head.d_out()
    }

    /// Per-event features before the prediction head, `n x 128`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let n = s.value(x).rows();
        let local = self.local.forward(s, x)?;
        let g = self.global.forward(s, local)?;
        let g = s.tape.reduce_max(g, 0)?;
        let g = repeat_row(s, g, n)?;
        let cat = s.tape.concat(&[local, g], 1)?;
        self.head.forward(s, cat)
    }
}

/// Functional form of [`PointNet::forward`].
pub fn pointnet_forward(s: &mut Session, x: Var, net: &PointNet) -> Result<Var> {
    net.forward(s, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn concat_widths() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let std = PointNet::new(&mut store, "a", 5, PointNetVariant::Standard, &mut rng).unwrap();
        let adapted = PointNet::new(&mut store, "b", 5, PointNetVariant::Adapted, &mut rng).unwrap();
        assert_eq!(std.concat_width(), 1152);
        assert_eq!(adapted.concat_width(), 2048);
    }

    #[test]
    fn duplicate_events_get_identical_outputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = PointNet::new(&mut store, "p", 3, PointNetVariant::Standard, &mut rng).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.5, -0.2], vec![1.0, -1.0, 0.3], vec![0.1, 0.5, -0.2]]).unwrap();
        let mut s = Session::new(&mut store, false, 0);
        let xv = s.input(x);
        let y = pointnet_forward(&mut s, xv, &net).unwrap();
        let y = s.value(y);
        assert_eq!(y.shape(), [3, 128]);
        assert_eq!(y.row(0), y.row(2));
    }
}
