//! PointNet features and the alternating point/grid U-Net.
//!
//! Levels run `0..depth`, finest first. Moving from level `l` to `l + 1`
//! halves the resolution with a stride-2 convolution only when
//! `l + 1 >= no_resample_top`; otherwise the resolution is kept. The U-Net
//! has `2 * depth - 1` blocks: a down block per level except the last, the
//! bottleneck, and an up block per level except the last. The final up
//! block (level 0) is always convolution-only, which leaves
//! `2 * depth - 2` slots that can alternate with point features. Slots are
//! switched on finest level first, in the order
//! `down0, down1, up1, down2, up2, ..., bottleneck`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Bound, ConvSpec, Graph, Padding, ParamSet, Var};
use crate::convert::{self, FeatureGrid, GridMode, Lattice, PointMaps};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::nn;
use crate::tensor::Tensor;

pub const POINTNET_BLOCKS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub mode: GridMode,
    pub resolution: usize,
    pub dim: usize,
    pub depth: usize,
    pub no_resample_top: usize,
    /// Number of alternating blocks; `None` uses every available slot.
    pub alternation: Option<usize>,
    pub padding: Padding,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mode: GridMode::Triplane,
            resolution: 64,
            dim: 32,
            depth: 4,
            no_resample_top: 2,
            alternation: None,
            padding: Padding::Zero,
        }
    }
}

/// One U-Net block position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Down(usize),
    Bottleneck,
    Up(usize),
}

impl Block {
    fn name(self) -> String {
        match self {
            Block::Down(l) => format!("unet.down{l}"),
            Block::Bottleneck => "unet.mid".into(),
            Block::Up(l) => format!("unet.up{l}"),
        }
    }
}

impl EncoderConfig {
    pub fn max_alternation(&self) -> usize {
        2 * self.depth - 2
    }

    pub fn alternation_count(&self) -> usize {
        self.alternation.unwrap_or(self.max_alternation())
    }

    /// Whether the transition from level `l` to `l + 1` halves the resolution.
    pub fn resamples(&self, l: usize) -> bool {
        l + 1 >= self.no_resample_top
    }

    pub fn lattices(&self) -> Vec<Lattice> {
        let mut lat = Lattice::unit(self.resolution);
        let mut out = vec![lat];
        for l in 0..self.depth - 1 {
            if self.resamples(l) {
                lat = lat.coarsen();
            }
            out.push(lat);
        }
        out
    }

    /// Alternation slots in activation order.
    pub fn slot_order(&self) -> Vec<Block> {
        let mut slots = Vec::new();
        for l in 0..self.depth - 1 {
            slots.push(Block::Down(l));
            if l > 0 {
                slots.push(Block::Up(l));
            }
        }
        if self.depth > 1 {
            slots.push(Block::Bottleneck);
        }
        slots
    }

    pub fn alternates(&self, block: Block) -> bool {
        self.slot_order()
            .iter()
            .take(self.alternation_count())
            .any(|&b| b == block)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 8 || !r.is_power_of_two() {
            return Err(Error::Config(format!("resolution must be a power of 2 >= 8, got {r}")));
        }
        if self.dim == 0 {
            return Err(Error::Config("feature dim must be at least 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("U-Net depth must be at least 1".into()));
        }
        let coarsest = self.lattices().last().map_or(r, |l| l.res);
        if coarsest < 4 {
            return Err(Error::Config(format!(
                "depth {} with no_resample_top {} shrinks resolution {r} below 4",
                self.depth, self.no_resample_top
            )));
        }
        if self.alternation_count() > self.max_alternation() {
            return Err(Error::Config(format!(
                "alternation count {} exceeds the {} available slots",
                self.alternation_count(),
                self.max_alternation()
            )));
        }
        Ok(())
    }

    fn dims(&self) -> usize {
        self.mode.dims()
    }
}

/// Allocates every encoder parameter. Conversion MLPs exist for every
/// alternation slot whether or not it is active, so the parameter set does
/// not depend on the alternation count.
pub fn init_params<R: Rng>(cfg: &EncoderConfig, rng: &mut R, ps: &mut ParamSet) -> Result<()> {
    cfg.validate()?;
    let (d, dims) = (cfg.dim, cfg.dims());
    nn::init_linear(ps, rng, "pn.in", 3, d, false);
    for i in 0..POINTNET_BLOCKS {
        nn::init_resnet_fc(ps, rng, &format!("pn.block{i}"), d);
        nn::init_linear(ps, rng, &format!("pn.merge{i}"), 2 * d, d, false);
    }
    nn::init_mlp2(ps, rng, "grid.in", (d, d, d), false);
    let mut blocks: Vec<Block> = (0..cfg.depth - 1).map(Block::Down).collect();
    blocks.push(Block::Bottleneck);
    blocks.extend((0..cfg.depth - 1).rev().map(Block::Up));
    let slots = cfg.slot_order();
    for b in blocks {
        let name = b.name();
        nn::init_conv(ps, rng, &format!("{name}.conv0"), dims, 3, d, d);
        nn::init_conv(ps, rng, &format!("{name}.conv1"), dims, 3, d, d);
        if slots.contains(&b) {
            nn::init_mlp2(ps, rng, &format!("{name}.mlp"), (d, d, d), true);
        }
        if let Block::Down(l) = b {
            if cfg.resamples(l) {
                nn::init_conv(ps, rng, &format!("unet.pool{l}"), dims, 3, d, d);
            }
        }
        if let Block::Up(l) = b {
            if cfg.resamples(l) {
                nn::init_conv(ps, rng, &format!("unet.unpool{l}"), dims, 3, d, d);
            }
            nn::init_linear(ps, rng, &format!("unet.skip{l}"), 2 * d, d, false);
        }
    }
    Ok(())
}

/// Point index structures for every U-Net level of one cloud.
#[derive(Clone, Debug)]
pub struct EncoderMaps {
    pub levels: Vec<Arc<PointMaps>>,
    /// Per-point offset from its nearest level-0 node, in cells.
    pub local: Tensor,
}

impl EncoderMaps {
    pub fn new(cfg: &EncoderConfig, points: &[Point]) -> Result<Self> {
        cfg.validate()?;
        let lattices = cfg.lattices();
        let mut levels: Vec<Arc<PointMaps>> = Vec::with_capacity(lattices.len());
        for (l, &lat) in lattices.iter().enumerate() {
            let reuse = l > 0 && lattices[l - 1] == lat;
            levels.push(if reuse {
                levels[l - 1].clone()
            } else {
                Arc::new(PointMaps::on_lattice(points, cfg.mode, lat)?)
            });
        }
        let lat = lattices[0];
        let local = points
            .iter()
            .flat_map(|p| p.map(|c| c * lat.scale - lat.nearest(c) as f64))
            .collect();
        Ok(EncoderMaps {
            levels,
            local: Tensor::new(&[points.len(), 3], local)?,
        })
    }

    pub fn n_points(&self) -> usize {
        self.levels[0].n_points
    }
}

/// Shallow PointNet with local max pooling after every residual block.
/// Inputs are offsets to the nearest lattice node, so features depend on
/// a point's position within its cell, not on absolute position.
pub fn pointnet_graph(g: &mut Graph, p: &Bound, maps: &EncoderMaps) -> Result<Var> {
    let x = g.constant(maps.local.clone());
    let mut h = nn::linear(g, p, x, "pn.in")?;
    let level = &maps.levels[0];
    for i in 0..POINTNET_BLOCKS {
        h = nn::resnet_fc(g, p, h, &format!("pn.block{i}"))?;
        let pooled = convert::scatter_max_graph(g, h, level)?;
        let back = convert::pick_nodes_graph(g, &pooled, level)?;
        let cat = g.concat(&[h, back], 1)?;
        h = nn::linear(g, p, cat, &format!("pn.merge{i}"))?;
    }
    Ok(h)
}

fn conv_relu(g: &mut Graph, p: &Bound, planes: &[Var], name: &str, spec: ConvSpec) -> Result<Vec<Var>> {
    nn::per_plane(g, planes, |g, x| {
        let y = nn::conv(g, p, x, name, spec)?;
        Ok(g.relu(y))
    })
}

/// Two conv+ReLU layers, then (when `alternate`) gather to points, add the
/// point skip, point MLP, scatter back and add to the conv output.
/// Returns the new grid and the point features for the next block.
pub fn alto_block(
    g: &mut Graph,
    p: &Bound,
    name: &str,
    planes: &[Var],
    point_skip: Option<Var>,
    maps: &PointMaps,
    padding: Padding,
    alternate: bool,
) -> Result<(Vec<Var>, Option<Var>)> {
    let spec = ConvSpec::same(padding);
    let c = conv_relu(g, p, planes, &format!("{name}.conv0"), spec)?;
    let c = conv_relu(g, p, &c, &format!("{name}.conv1"), spec)?;
    if !alternate {
        return Ok((c, point_skip));
    }
    let mut pts = convert::grid_to_point_graph(g, &c, maps)?;
    if let Some(s) = point_skip {
        pts = g.add(pts, s)?;
    }
    let pts = nn::mlp2(g, p, pts, &format!("{name}.mlp"))?;
    let scattered = convert::scatter_mean_graph(g, pts, maps)?;
    let out = c
        .iter()
        .zip(&scattered)
        .map(|(&a, &b)| g.add(a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, Some(pts)))
}

pub fn alto_unet_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &EncoderConfig,
    initial: &[Var],
    point_feats: Var,
    maps: &EncoderMaps,
) -> Result<Vec<Var>> {
    let pad = cfg.padding;
    let mut x = initial.to_vec();
    let mut pf = Some(point_feats);
    let mut skips = Vec::new();
    for l in 0..cfg.depth - 1 {
        let b = Block::Down(l);
        let (y, q) = alto_block(g, p, &b.name(), &x, pf, &maps.levels[l], pad, cfg.alternates(b))?;
        pf = q;
        skips.push(y.clone());
        x = if cfg.resamples(l) {
            conv_relu(g, p, &y, &format!("unet.pool{l}"), ConvSpec::down(pad))?
        } else {
            y
        };
    }
    let last = cfg.depth - 1;
    let mid = Block::Bottleneck;
    let (y, q) = alto_block(g, p, &mid.name(), &x, pf, &maps.levels[last], pad, cfg.alternates(mid))?;
    x = y;
    pf = q;
    for l in (0..cfg.depth - 1).rev() {
        if cfg.resamples(l) {
            let up = nn::per_plane(g, &x, |g, v| g.upsample(v))?;
            x = conv_relu(g, p, &up, &format!("unet.unpool{l}"), ConvSpec::same(pad))?;
        }
        let skip = &skips[l];
        x = x
            .iter()
            .zip(skip)
            .map(|(&a, &s)| merge_skip(g, p, a, s, &format!("unet.skip{l}")))
            .collect::<Result<Vec<_>>>()?;
        let b = Block::Up(l);
        let (y, q) = alto_block(g, p, &b.name(), &x, pf, &maps.levels[l], pad, cfg.alternates(b))?;
        x = y;
        pf = q;
    }
    Ok(x)
}

/// Channel concatenation followed by a 1x1 linear map back to `d`.
fn merge_skip(g: &mut Graph, p: &Bound, x: Var, skip: Var, name: &str) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let d = *shape.last().unwrap_or(&0);
    let rank = shape.len();
    let cat = g.concat(&[x, skip], rank - 1)?;
    let rows = g.reshape(cat, &[shape[..rank - 1].iter().product(), 2 * d])?;
    let merged = nn::linear(g, p, rows, name)?;
    g.reshape(merged, &shape)
}

/// PointNet, projection to the grid, then the U-Net. Returns one `Var` per plane.
pub fn encode_graph(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, maps: &EncoderMaps) -> Result<Vec<Var>> {
    let feats = pointnet_graph(g, p, maps)?;
    let initial = convert::point_to_grid_graph(g, p, "grid.in", feats, &maps.levels[0])?;
    alto_unet_graph(g, p, cfg, &initial, feats, maps)
}

pub fn encode(cloud: &PointCloud, params: &ParamSet, cfg: &EncoderConfig) -> Result<FeatureGrid> {
    let maps = EncoderMaps::new(cfg, &cloud.points)?;
    let mut g = Graph::new();
    let p = params.bind_const(&mut g);
    let planes = encode_graph(&mut g, &p, cfg, &maps)?;
    FeatureGrid::new(cfg.mode, planes.iter().map(|&v| g.value(v).clone()).collect())
}

pub fn pointnet_encode(cloud: &PointCloud, params: &ParamSet, cfg: &EncoderConfig) -> Result<Tensor> {
    let maps = EncoderMaps::new(cfg, &cloud.points)?;
    let mut g = Graph::new();
    let p = params.bind_const(&mut g);
    let h = pointnet_graph(&mut g, &p, &maps)?;
    Ok(g.value(h).clone())
}
