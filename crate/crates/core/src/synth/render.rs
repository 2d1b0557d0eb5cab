use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bev::{pyramid_specs, rasterize_semantic_gt, BevGrid, BevPyramid, PYRAMID_LEVELS};
use crate::geometry::{GridSpec, Pose6, SegmentSampling};
use crate::map::{MapElement, SemanticType};
use crate::matcher::{level_key, MatcherParams, TABLE};
use crate::{Error, Result, Tensor};

/// Dot product between a rendered signature and its own (projected) table
/// row; `sigmoid(ln 9) = 0.9`.
pub const ORACLE_DOT: f64 = 2.197_224_577_336_219_4;

/// Per-level, per-type feature vectors painted by the oracle renderer.
#[derive(Debug, Clone, PartialEq)]
pub struct Signatures {
    /// `N_e × C_l` per level.
    pub levels: Vec<Tensor>,
}

impl Signatures {
    /// Frozen snapshot of the table: row `j` at level `l` is
    /// `ORACLE_DOT / |P_l E_j|² · P_l E_j`, with `P_0` the identity.
    pub fn from_params(params: &MatcherParams) -> Self {
        let table = params.get(TABLE);
        let levels = (0..PYRAMID_LEVELS)
            .map(|l| {
                let mut t = if l == 0 {
                    table.clone()
                } else {
                    table.matmul(params.get(&level_key("seg_proj", l)))
                };
                for j in 0..t.rows {
                    let row = t.row_mut(j);
                    let n2: f64 = row.iter().map(|v| v * v).sum();
                    let k = if n2 > 0.0 { ORACLE_DOT / n2 } else { 0.0 };
                    row.iter_mut().for_each(|v| *v *= k);
                }
                t
            })
            .collect();
        Self { levels }
    }

    pub fn channels(&self) -> [usize; PYRAMID_LEVELS] {
        [0, 1, 2].map(|l| self.levels[l].cols)
    }
}

/// Rendering sampling for layer `spec`: points half a cell apart.
pub(crate) fn render_sampling(spec: &GridSpec) -> SegmentSampling {
    SegmentSampling::Spacing(spec.resolution / 2.0)
}

/// Binary occupancy per semantic type, `cells × N_e`, at `pose`. Shared by
/// the renderer and the segmentation targets.
pub fn semantic_targets(elements: &[MapElement], pose: &Pose6, spec: &GridSpec) -> Result<Tensor> {
    let n = SemanticType::COUNT;
    let mut out = Tensor::zeros(spec.cells(), n);
    for sem in SemanticType::ALL {
        let group: Vec<MapElement> = elements.iter().filter(|e| e.sem == sem).copied().collect();
        if group.is_empty() {
            continue;
        }
        let mask = rasterize_semantic_gt(&group, pose, spec, render_sampling(spec))?;
        for (cell, &v) in mask.data.iter().enumerate() {
            out.data[cell * n + sem.index()] = v;
        }
    }
    Ok(out)
}

/// Oracle BEV pyramid: every cell occupied by a type-`j` element at
/// `gt_pose` gets signature `j` added, then i.i.d. Gaussian noise.
pub fn render_oracle_bev(
    elements: &[MapElement],
    gt_pose: &Pose6,
    signatures: &Signatures,
    specs: &[GridSpec; PYRAMID_LEVELS],
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<BevPyramid> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::arg(format!("noise_std must be non-negative, got {noise_std}")));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::arg(e.to_string()))?;
    let mut layers = Vec::with_capacity(PYRAMID_LEVELS);
    for (l, spec) in specs.iter().enumerate() {
        let sig = &signatures.levels[l];
        let c = sig.cols;
        let mut grid = BevGrid::zeros(*spec, c, l);
        let targets = semantic_targets(elements, gt_pose, spec)?;
        for cell in 0..spec.cells() {
            for (j, &occ) in targets.row(cell).iter().enumerate() {
                if occ != 0.0 {
                    let dst = &mut grid.data[cell * c..(cell + 1) * c];
                    dst.iter_mut().zip(sig.row(j)).for_each(|(d, s)| *d += s);
                }
            }
        }
        if noise_std > 0.0 {
            grid.data.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        layers.push(grid);
    }
    BevPyramid::new(layers)
}

/// Render settings bundled for frame generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Renderer {
    pub specs: [GridSpec; PYRAMID_LEVELS],
    pub signatures: Signatures,
    pub noise_std: f64,
}

impl Renderer {
    pub fn new(base: GridSpec, signatures: Signatures, noise_std: f64) -> Self {
        Self {
            specs: pyramid_specs(base),
            signatures,
            noise_std,
        }
    }

    pub fn render(&self, elements: &[MapElement], gt_pose: &Pose6, rng: &mut impl Rng) -> Result<BevPyramid> {
        render_oracle_bev(elements, gt_pose, &self.signatures, &self.specs, self.noise_std, rng)
    }
}
