//! Nested dense-skip decoder.
//!
//! Node `D-i,j` (`j >= 1`, `i + j <= depth`) concatenates every same-row
//! predecessor `X-i,0 .. X-i,j-1` with the ×2-upsampled `X-(i+1),j-1`, then
//! applies conv+BN+ReLU. `X-i,0` is encoder level `i`.

use super::config::UNetPPConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Act, Builder, ConvBnAct};
use crate::ops::ResizeMode;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct UNetPP {
    pub depth: usize,
    /// `nodes[i][j - 1]` is `D-i,j`.
    pub nodes: Vec<Vec<ConvBnAct>>,
    level_channels: Vec<usize>,
}

/// Number of decoder nodes for a given nesting depth.
pub fn node_count(depth: usize) -> usize {
    depth * (depth + 1) / 2
}

impl UNetPP {
    /// `level_channels` lists encoder channels from the finest level down;
    /// it must have `depth + 1` entries.
    pub fn new(b: &mut Builder, cfg: &UNetPPConfig, level_channels: &[usize]) -> Result<Self> {
        let depth = cfg.depth;
        if level_channels.len() != depth + 1 || cfg.widths.len() != depth {
            return Err(Error::Config(format!(
                "decoder depth {depth} needs {} encoder levels and {depth} widths, got {} and {}",
                depth + 1,
                level_channels.len(),
                cfg.widths.len()
            )));
        }
        // Channels of X-i,j.
        let ch = |i: usize, j: usize| if j == 0 { level_channels[i] } else { cfg.widths[i] };
        let mut nodes = Vec::with_capacity(depth);
        for i in 0..depth {
            let mut row = Vec::new();
            for j in 1..=depth - i {
                let cin: usize = (0..j).map(|k| ch(i, k)).sum::<usize>() + ch(i + 1, j - 1);
                row.push(b.scope(format!("d{i}_{j}"), |b| ConvBnAct::new(b, cin, cfg.widths[i], 3, 1, Act::Relu))?);
            }
            nodes.push(row);
        }
        Ok(UNetPP {
            depth,
            nodes,
            level_channels: level_channels.to_vec(),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.nodes[0].last().map_or(self.level_channels[0], |n| n.conv.cout)
    }

    /// Returns `D-0,depth`, at the resolution of encoder level 0.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, levels: &[Var]) -> Result<Var> {
        if levels.len() != self.depth + 1 {
            return Err(Error::invalid_shape(
                "unetpp",
                format!("expected {} feature levels, got {}", self.depth + 1, levels.len()),
            ));
        }
        for i in 0..self.depth {
            let (a, b) = (g.shape(levels[i]), g.shape(levels[i + 1]));
            if a.h() != 2 * b.h() || a.w() != 2 * b.w() || a.n() != b.n() {
                return Err(Error::shape("unetpp pyramid", a, b));
            }
        }
        // grid[i][j] = X-i,j
        let mut grid: Vec<Vec<Var>> = levels.iter().map(|&v| vec![v]).collect();
        for j in 1..=self.depth {
            for i in 0..=self.depth - j {
                let below = grid[i + 1][j - 1];
                let s = g.shape(below);
                let up = g.resize(below, s.h() * 2, s.w() * 2, ResizeMode::Nearest)?;
                let mut parts = grid[i][..j].to_vec();
                parts.push(up);
                let cat = g.concat(&parts, 1)?;
                let y = self.nodes[i][j - 1].forward(g, cat)?;
                grid[i].push(y);
            }
        }
        Ok(grid[0][self.depth])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Mode, ParamStore};
    use crate::tensor::Tensor;

    #[test]
    fn depth_four_has_ten_nodes() {
        let cfg = UNetPPConfig { depth: 4, widths: vec![4, 4, 4, 4], out_channels: 4 };
        let mut store = ParamStore::new();
        let d = UNetPP::new(&mut Builder::new(&mut store, 0), &cfg, &[2, 3, 4, 5, 6]).unwrap();
        assert_eq!(d.nodes.iter().map(Vec::len).sum::<usize>(), 10);
        assert_eq!(node_count(4), 10);
    }

    #[test]
    fn depth_one_is_a_single_skip_concat() {
        let cfg = UNetPPConfig { depth: 1, widths: vec![5], out_channels: 5 };
        let mut store = ParamStore::new();
        let d = UNetPP::new(&mut Builder::new(&mut store, 0), &cfg, &[3, 7]).unwrap();
        assert_eq!(d.nodes.len(), 1);
        assert_eq!(d.nodes[0].len(), 1);
        assert_eq!(d.nodes[0][0].conv.cin, 3 + 7);
        let mut g = Graph::new(&store, Mode::Eval);
        let x0 = g.input(Tensor::zeros([1, 3, 8, 6]));
        let x1 = g.input(Tensor::zeros([1, 7, 4, 3]));
        let y = d.forward(&mut g, &[x0, x1]).unwrap();
        assert_eq!(g.shape(y).dims(), [1, 5, 8, 6]);
    }

    #[test]
    fn inconsistent_pyramid_rejected() {
        let cfg = UNetPPConfig { depth: 1, widths: vec![5], out_channels: 5 };
        let mut store = ParamStore::new();
        let d = UNetPP::new(&mut Builder::new(&mut store, 0), &cfg, &[3, 7]).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let x0 = g.input(Tensor::zeros([1, 3, 8, 6]));
        let x1 = g.input(Tensor::zeros([1, 7, 3, 3]));
        assert!(d.forward(&mut g, &[x0, x1]).is_err());
    }

    #[test]
    fn output_matches_level_zero_resolution() {
        let cfg = UNetPPConfig { depth: 4, widths: vec![4, 5, 6, 7], out_channels: 4 };
        let chans = [2, 3, 4, 5, 6];
        let mut store = ParamStore::new();
        let d = UNetPP::new(&mut Builder::new(&mut store, 0), &cfg, &chans).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let levels: Vec<Var> = chans
            .iter()
            .enumerate()
            .map(|(i, &c)| g.input(Tensor::full([2, c, 32 >> i, 16 >> i], 0.1 * i as f32)))
            .collect();
        let y = d.forward(&mut g, &levels).unwrap();
        assert_eq!(g.shape(y).dims(), [2, 4, 32, 16]);
    }
}
