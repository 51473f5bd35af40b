//! Dual-branch registration network.
//!
//! Each branch (rotation, translation) owns a point-wise encoder of `K`
//! blocks (`linear -> layer norm -> ReLU`, applied to each point
//! independently). The global feature of a cloud is the channel-wise max over
//! points of all block outputs concatenated. Selected blocks additionally
//! receive the other cloud's max-pooled output of the previous block,
//! broadcast to every point (point-wise feature interaction). The global
//! features of both clouds are then mixed by a per-branch perceptron (global
//! feature interaction) before the rotation head regresses a quaternion and
//! the translation head regresses one saliency point per cloud.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Quaternion, RigidTransform, Vec3};
use crate::nn::{BoundParams, ParamId, ParamSet, PoolMask, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Rotation,
    Translation,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Rotation, Branch::Translation];

    pub(crate) fn index(self) -> usize {
        match self {
            Branch::Rotation => 0,
            Branch::Translation => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Branch::Rotation => "rotation",
            Branch::Translation => "translation",
        }
    }
}

/// Architecture description. Every parameter shape follows from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output width of each point-wise block.
    pub block_channels: Vec<usize>,
    /// 1-based indices of the blocks that consume the other cloud's summary.
    pub pfi_positions: Vec<usize>,
    /// Hidden width of the global interaction perceptron.
    pub gfi_hidden: usize,
    /// Width of the hybrid features fed to the regression heads.
    pub hybrid_dim: usize,
    pub rotation_head: Vec<usize>,
    pub translation_head: Vec<usize>,
    /// Number of refinement iterations.
    pub iterations: usize,
    /// Treat the accumulated transform as a constant between iterations.
    pub detach_iterations: bool,
    pub layer_norm: bool,
    pub use_pfi: bool,
    pub use_gfi: bool,
    /// When false the translation branch shares the rotation branch's encoder
    /// and interaction weights.
    pub dual_branch: bool,
}

impl ModelConfig {
    /// Widths [64, 64, 128, 256], interaction before blocks 3 and 4.
    pub fn paper() -> Self {
        Self {
            block_channels: vec![64, 64, 128, 256],
            pfi_positions: vec![3, 4],
            gfi_hidden: 512,
            hybrid_dim: 512,
            rotation_head: vec![512, 256],
            translation_head: vec![512, 256],
            iterations: 4,
            detach_iterations: true,
            layer_norm: true,
            use_pfi: true,
            use_gfi: true,
            dual_branch: true,
        }
    }

    /// Smallest profile, used by gradient checks and invariance tests.
    pub fn test() -> Self {
        Self {
            block_channels: vec![8, 8, 16, 16],
            pfi_positions: vec![3, 4],
            gfi_hidden: 48,
            hybrid_dim: 48,
            rotation_head: vec![32, 16],
            translation_head: vec![32, 16],
            ..Self::paper()
        }
    }

    /// Mid-sized profile for single-machine training runs.
    pub fn desk() -> Self {
        Self {
            block_channels: vec![16, 16, 32, 64],
            pfi_positions: vec![3, 4],
            gfi_hidden: 128,
            hybrid_dim: 128,
            rotation_head: vec![128, 64],
            translation_head: vec![128, 64],
            ..Self::paper()
        }
    }

    /// Width of a global feature: the sum of block widths.
    pub fn feature_dim(&self) -> usize {
        self.block_channels.iter().sum()
    }

    pub fn hybrid_width(&self) -> usize {
        if self.use_gfi {
            self.hybrid_dim
        } else {
            self.feature_dim()
        }
    }

    fn pfi_at(&self, block: usize) -> bool {
        self.use_pfi && self.pfi_positions.contains(&(block + 1))
    }

    fn block_input_width(&self, block: usize) -> usize {
        if block == 0 {
            3
        } else if self.pfi_at(block) {
            2 * self.block_channels[block - 1]
        } else {
            self.block_channels[block - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.block_channels.len();
        if k < 2 {
            return Err(Error::invalid("need at least two encoder blocks"));
        }
        if self.block_channels.contains(&0) {
            return Err(Error::invalid("block widths must be positive"));
        }
        if let Some(p) = self.pfi_positions.iter().find(|p| **p < 2 || **p > k) {
            return Err(Error::invalid(format!(
                "interaction position {p} outside 2..={k}"
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.gfi_hidden == 0 || self.hybrid_dim == 0 {
            return Err(Error::invalid("interaction widths must be positive"));
        }
        if self.rotation_head.iter().chain(&self.translation_head).any(|c| *c == 0) {
            return Err(Error::invalid("head widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    weight: ParamId,
    bias: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct MlpIds {
    layers: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct Layout {
    encoders: [Vec<BlockIds>; 2],
    gfi: [Option<MlpIds>; 2],
    rotation_head: MlpIds,
    translation_head: MlpIds,
}

fn push_mlp<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    widths: &[usize],
    rng: &mut ChaCha8Rng,
) -> MlpIds {
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let weight = params.push_uniform(format!("{prefix}.layer{}.weight", i + 1), w[0], w[1], w[0], rng);
            let bias = params.push_uniform(format!("{prefix}.layer{}.bias", i + 1), 1, w[1], w[0], rng);
            (weight, bias)
        })
        .collect();
    MlpIds { layers }
}

fn build_layout<T: Scalar>(config: &ModelConfig, seed: u64) -> (ParamSet<T>, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let branches = if config.dual_branch { 2 } else { 1 };
    let mut encoders: Vec<Vec<BlockIds>> = Vec::new();
    let mut gfi: Vec<Option<MlpIds>> = Vec::new();
    let f = config.feature_dim();
    for b in Branch::BOTH.iter().take(branches) {
        let blocks = config
            .block_channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let cin = config.block_input_width(k);
                let prefix = format!("{}.encoder.block{}", b.name(), k + 1);
                let weight = params.push_uniform(format!("{prefix}.weight"), cin, c, cin, &mut rng);
                let bias = params.push_uniform(format!("{prefix}.bias"), 1, c, cin, &mut rng);
                let norm = config.layer_norm.then(|| {
                    let g = params.push(format!("{prefix}.norm.gain"), Tensor::row_vector(vec![T::one(); c]));
                    let beta = params.push(format!("{prefix}.norm.bias"), Tensor::zeros(1, c));
                    (g, beta)
                });
                BlockIds { weight, bias, norm }
            })
            .collect();
        encoders.push(blocks);
        gfi.push(config.use_gfi.then(|| {
            push_mlp(
                &mut params,
                &format!("{}.gfi", b.name()),
                &[2 * f, config.gfi_hidden, config.hybrid_dim],
                &mut rng,
            )
        }));
    }
    if !config.dual_branch {
        encoders.push(encoders[0].clone());
        gfi.push(gfi[0].clone());
    }
    let h = config.hybrid_width();
    let mut rot = vec![4 * h];
    rot.extend(&config.rotation_head);
    rot.push(4);
    let mut trans = vec![3 * h];
    trans.extend(&config.translation_head);
    trans.push(3);
    let rotation_head = push_mlp(&mut params, "rotation.head", &rot, &mut rng);
    let translation_head = push_mlp(&mut params, "translation.head", &trans, &mut rng);
    let mut encoders = encoders.into_iter();
    let mut gfi = gfi.into_iter();
    let layout = Layout {
        encoders: [encoders.next().unwrap(), encoders.next().unwrap()],
        gfi: [gfi.next().unwrap(), gfi.next().unwrap()],
        rotation_head,
        translation_head,
    };
    (params, layout)
}

/// Network weights together with their architecture.
#[derive(Clone, Debug)]
pub struct RegistrationNet<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
}

/// Per-block point-wise features and the pooled global feature of one cloud
/// in one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchFeatures<T> {
    /// `f^(k)`, one `N x C_k` array per block.
    pub pointwise: Vec<Tensor<T>>,
    /// Channel-wise max over points of the concatenated blocks.
    pub global: Vec<T>,
}

impl<T: Scalar> BranchFeatures<T> {
    /// Max-pooled output of each block, the summaries another cloud consumes.
    pub fn summaries(&self) -> Vec<Vec<T>> {
        let mut out = Vec::with_capacity(self.pointwise.len());
        let mut off = 0;
        for f in &self.pointwise {
            out.push(self.global[off..off + f.cols()].to_vec());
            off += f.cols();
        }
        out
    }
}

/// All features of one cloud for one registration iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T> {
    pub rotation: BranchFeatures<T>,
    pub translation: BranchFeatures<T>,
    pub hybrid_r: Vec<T>,
    pub hybrid_t: Vec<T>,
}

impl<T: Scalar> FeatureBundle<T> {
    pub fn branch(&self, b: Branch) -> &BranchFeatures<T> {
        match b {
            Branch::Rotation => &self.rotation,
            Branch::Translation => &self.translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult<T> {
    /// Residual estimate of each iteration.
    pub per_iteration: Vec<RigidTransform<T>>,
    /// Composition of the residuals, in order.
    pub final_transform: RigidTransform<T>,
    /// Saliency point of the transformed source, per iteration.
    pub saliency_source: Vec<Vec3<T>>,
    /// Saliency point of the reference, per iteration.
    pub saliency_reference: Vec<Vec3<T>>,
}

/// Tape-side outputs of one cloud's encoding.
#[derive(Clone, Debug)]
pub(crate) struct Encoded {
    pub blocks: Vec<Var>,
    pub global: Var,
}

/// Tape-side outputs of one registration iteration.
#[derive(Clone, Debug)]
pub(crate) struct IterationVars {
    /// `[branch][cloud]`, cloud 0 is the transformed source.
    pub encoded: [[Encoded; 2]; 2],
    /// `[branch][cloud]`.
    pub hybrid: [[Var; 2]; 2],
    /// Unit quaternion, canonical hemisphere.
    pub rotation: Var,
    pub translation: Var,
    pub saliency: [Var; 2],
}

impl<T: Scalar> RegistrationNet<T> {
    /// Fresh network with fan-in uniform initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build_layout(&config, seed);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Network with the given weights; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let (reference, layout) = build_layout::<T>(&config, 0);
        if reference.layout() != params.layout() {
            return Err(Error::shape(
                "parameter set",
                format!("{} tensors matching the config", reference.len()),
                format!("{} tensors with a different layout", params.len()),
            ));
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> RegistrationNet<U> {
        RegistrationNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Names of the parameters owned by one branch (encoder and interaction).
    pub fn branch_param_names(&self, branch: Branch) -> Vec<String> {
        let prefix = format!("{}.", branch.name());
        self.params
            .iter()
            .filter(|p| p.name.starts_with(&prefix) && !p.name.contains(".head."))
            .map(|p| p.name.clone())
            .collect()
    }

    // ---- tape-level building blocks ----

    fn block(&self, tape: &mut Tape<T>, bp: &BoundParams, ids: &BlockIds, input: Var) -> Var {
        let y = tape.linear(input, bp.var(ids.weight), bp.var(ids.bias));
        let y = match ids.norm {
            Some((g, b)) => tape.layer_norm(y, bp.var(g), bp.var(b)),
            None => y,
        };
        tape.relu(y)
    }

    fn mlp(&self, tape: &mut Tape<T>, bp: &BoundParams, ids: &MlpIds, input: Var) -> Var {
        let mut x = input;
        let last = ids.layers.len() - 1;
        for (i, (w, b)) in ids.layers.iter().enumerate() {
            x = tape.linear(x, bp.var(*w), bp.var(*b));
            if i < last {
                x = tape.relu(x);
            }
        }
        x
    }

    /// Encodes two clouds in lockstep so interaction blocks can see the other
    /// cloud's previous-block summary. Pool masks, when given, zero the
    /// masked entries in every max-pool of that cloud.
    pub(crate) fn encode_joint(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams,
        branch: Branch,
        clouds: [Var; 2],
        masks: [Option<&PoolMask>; 2],
    ) -> [Encoded; 2] {
        let blocks_ids = &self.layout.encoders[branch.index()];
        let mut blocks: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        let mut pooled: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        for (k, ids) in blocks_ids.iter().enumerate() {
            let mut outs = [clouds[0]; 2];
            for s in 0..2 {
                let input = if k == 0 {
                    clouds[s]
                } else if self.config.pfi_at(k) {
                    let n = tape.value(blocks[s][k - 1]).rows();
                    let other = tape.broadcast_rows(pooled[1 - s][k - 1], n);
                    tape.concat(&[blocks[s][k - 1], other])
                } else {
                    blocks[s][k - 1]
                };
                outs[s] = self.block(tape, bp, ids, input);
            }
            for s in 0..2 {
                blocks[s].push(outs[s]);
                let p = tape.max_rows(outs[s], masks[s]);
                pooled[s].push(p);
            }
        }
        let [b0, b1] = blocks;
        let [p0, p1] = pooled;
        let g0 = tape.concat(&p0);
        let g1 = tape.concat(&p1);
        [
            Encoded {
                blocks: b0,
                global: g0,
            },
            Encoded {
                blocks: b1,
                global: g1,
            },
        ]
    }

    /// Encodes a single cloud; interaction blocks read `summaries[k - 1]`
    /// (constants) or zeros when no summaries are supplied.
    fn encode_single(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams,
        branch: Branch,
        cloud: Var,
        summaries: Option<&[Var]>,
    ) -> Encoded {
        let ids = &self.layout.encoders[branch.index()];
        let mut blocks: Vec<Var> = Vec::new();
        let mut pooled = Vec::new();
        for (k, bid) in ids.iter().enumerate() {
            let input = if k == 0 {
                cloud
            } else if self.config.pfi_at(k) {
                let n = tape.value(blocks[k - 1]).rows();
                let summary = match summaries {
                    Some(s) => s[k - 1],
                    None => tape.constant(Tensor::zeros(1, self.config.block_channels[k - 1])),
                };
                let other = tape.broadcast_rows(summary, n);
                tape.concat(&[blocks[k - 1], other])
            } else {
                blocks[k - 1]
            };
            let out = self.block(tape, bp, bid, input);
            blocks.push(out);
            pooled.push(tape.max_rows(out, None));
        }
        let global = tape.concat(&pooled);
        Encoded { blocks, global }
    }

    pub(crate) fn gfi_var(&self, tape: &mut Tape<T>, bp: &BoundParams, branch: Branch, own: Var, other: Var) -> Var {
        match &self.layout.gfi[branch.index()] {
            Some(ids) => {
                let cat = tape.concat(&[own, other]);
                self.mlp(tape, bp, ids, cat)
            }
            None => own,
        }
    }

    pub(crate) fn rotation_var(&self, tape: &mut Tape<T>, bp: &BoundParams, inputs: [Var; 4]) -> Var {
        let cat = tape.concat(&inputs);
        let raw = self.mlp(tape, bp, &self.layout.rotation_head, cat);
        if tape.value(raw).data().iter().all(|v| *v == T::zero()) {
            warn!("rotation head produced a zero vector; falling back to identity");
        }
        let q = tape.normalize(raw);
        if tape.value(q).data()[0] < T::zero() {
            tape.scale(q, -T::one())
        } else {
            q
        }
    }

    pub(crate) fn saliency_var(&self, tape: &mut Tape<T>, bp: &BoundParams, inputs: [Var; 3]) -> Var {
        let cat = tape.concat(&inputs);
        self.mlp(tape, bp, &self.layout.translation_head, cat)
    }

    /// One full iteration on `(source', reference)` point tensors.
    pub(crate) fn iteration_vars(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams,
        source: Var,
        reference: Var,
    ) -> IterationVars {
        let er = self.encode_joint(tape, bp, Branch::Rotation, [source, reference], [None, None]);
        let et = self.encode_joint(tape, bp, Branch::Translation, [source, reference], [None, None]);
        let mut hybrid = [[source; 2]; 2];
        for (bi, (b, enc)) in Branch::BOTH.iter().zip([&er, &et]).enumerate() {
            hybrid[bi][0] = self.gfi_var(tape, bp, *b, enc[0].global, enc[1].global);
            hybrid[bi][1] = self.gfi_var(tape, bp, *b, enc[1].global, enc[0].global);
        }
        let [[hr_x, hr_y], [ht_x, ht_y]] = hybrid;
        let rotation = self.rotation_var(tape, bp, [hr_x, ht_x, hr_y, ht_y]);
        let c_x = self.saliency_var(tape, bp, [hr_x, ht_x, ht_y]);
        let c_y = self.saliency_var(tape, bp, [hr_y, ht_y, ht_x]);
        let translation = tape.sub(c_y, c_x);
        IterationVars {
            encoded: [er, et],
            hybrid,
            rotation,
            translation,
            saliency: [c_x, c_y],
        }
    }

    // ---- value-level API ----

    fn branch_features(tape: &Tape<T>, enc: &Encoded) -> BranchFeatures<T> {
        BranchFeatures {
            pointwise: enc.blocks.iter().map(|v| tape.value(*v).clone()).collect(),
            global: tape.value(enc.global).data().to_vec(),
        }
    }

    /// Encodes one cloud with one branch. `other_summaries`, when present,
    /// holds the other cloud's max-pooled output of every block (as returned
    /// by [`BranchFeatures::summaries`]); interaction blocks read the entry of
    /// the preceding block. Without summaries those inputs are zero.
    pub fn encoder_forward(
        &self,
        points: &PointCloud<T>,
        other_summaries: Option<&[Vec<T>]>,
        branch: Branch,
    ) -> Result<BranchFeatures<T>> {
        let channels = &self.config.block_channels;
        if let Some(s) = other_summaries {
            let got: Vec<usize> = s.iter().map(Vec::len).collect();
            if &got != channels {
                return Err(Error::shape("interaction summaries", format!("{channels:?}"), format!("{got:?}")));
            }
        }
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let cloud = tape.constant(Tensor::from_cloud(points));
        let sums: Option<Vec<Var>> = other_summaries.map(|s| {
            s.iter()
                .map(|v| tape.constant(Tensor::row_vector(v.clone())))
                .collect()
        });
        let enc = self.encode_single(&mut tape, &bp, branch, cloud, sums.as_deref());
        Ok(Self::branch_features(&tape, &enc))
    }

    /// Encodes two clouds with interaction between them.
    pub fn encode_pair(
        &self,
        a: &PointCloud<T>,
        b: &PointCloud<T>,
        branch: Branch,
    ) -> (BranchFeatures<T>, BranchFeatures<T>) {
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let va = tape.constant(Tensor::from_cloud(a));
        let vb = tape.constant(Tensor::from_cloud(b));
        let [ea, eb] = self.encode_joint(&mut tape, &bp, branch, [va, vb], [None, None]);
        (Self::branch_features(&tape, &ea), Self::branch_features(&tape, &eb))
    }

    /// Point-wise interaction block `block` (1-based): the block applied to
    /// each row of `own_prev` concatenated with the channel-wise max of
    /// `other_prev`.
    pub fn pfi(
        &self,
        branch: Branch,
        block: usize,
        own_prev: &Tensor<T>,
        other_prev: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if block < 2 || block > self.config.block_channels.len() || !self.config.pfi_at(block - 1) {
            return Err(Error::invalid(format!("block {block} is not an interaction block")));
        }
        let c = self.config.block_channels[block - 2];
        if own_prev.cols() != c || other_prev.cols() != c {
            return Err(Error::shape(
                "interaction input",
                format!("{c} channels on both inputs"),
                format!("{} and {}", own_prev.cols(), other_prev.cols()),
            ));
        }
        if own_prev.rows() == 0 || other_prev.rows() == 0 {
            return Err(Error::Empty("interaction input"));
        }
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let own = tape.constant(own_prev.clone());
        let other = tape.constant(other_prev.clone());
        let pooled = tape.max_rows(other, None);
        let rep = tape.broadcast_rows(pooled, own_prev.rows());
        let cat = tape.concat(&[own, rep]);
        let out = self.block(&mut tape, &bp, &self.layout.encoders[branch.index()][block - 1], cat);
        Ok(tape.value(out).clone())
    }

    /// Hybrid feature of `own` given `other` (order matters).
    pub fn gfi(&self, branch: Branch, own: &[T], other: &[T]) -> Result<Vec<T>> {
        let f = self.config.feature_dim();
        if own.len() != f || other.len() != f {
            return Err(Error::shape("global features", f, format!("{} and {}", own.len(), other.len())));
        }
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let a = tape.constant(Tensor::row_vector(own.to_vec()));
        let b = tape.constant(Tensor::row_vector(other.to_vec()));
        let h = self.gfi_var(&mut tape, &bp, branch, a, b);
        Ok(tape.value(h).data().to_vec())
    }

    fn check_hybrids(&self, hs: &[&[T]]) -> Result<()> {
        let h = self.config.hybrid_width();
        if let Some(bad) = hs.iter().find(|v| v.len() != h) {
            return Err(Error::shape("hybrid feature", h, bad.len()));
        }
        Ok(())
    }

    /// Unit quaternion (canonical hemisphere) from the four hybrid features.
    pub fn regress_rotation(
        &self,
        hr_source: &[T],
        ht_source: &[T],
        hr_reference: &[T],
        ht_reference: &[T],
    ) -> Result<Quaternion<T>> {
        self.check_hybrids(&[hr_source, ht_source, hr_reference, ht_reference])?;
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let vars = [hr_source, ht_source, hr_reference, ht_reference].map(|h| tape.constant(Tensor::row_vector(h.to_vec())));
        let q = self.rotation_var(&mut tape, &bp, vars);
        Ok(Quaternion::from_array(to_array4(tape.value(q).data())))
    }

    /// Saliency point of a cloud from its own hybrids and the other cloud's
    /// translation hybrid. The translation estimate is
    /// `c_reference - c_source`.
    pub fn regress_translation(&self, hr_own: &[T], ht_own: &[T], ht_other: &[T]) -> Result<Vec3<T>> {
        self.check_hybrids(&[hr_own, ht_own, ht_other])?;
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let vars = [hr_own, ht_own, ht_other].map(|h| tape.constant(Tensor::row_vector(h.to_vec())));
        let c = self.saliency_var(&mut tape, &bp, vars);
        let d = tape.value(c).data();
        Ok([d[0], d[1], d[2]])
    }

    /// Features of both clouds for one iteration, as the regression heads see them.
    pub fn features(&self, source: &PointCloud<T>, reference: &PointCloud<T>) -> (FeatureBundle<T>, FeatureBundle<T>) {
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let x = tape.constant(Tensor::from_cloud(source));
        let y = tape.constant(Tensor::from_cloud(reference));
        let it = self.iteration_vars(&mut tape, &bp, x, y);
        let bundle = |s: usize| FeatureBundle {
            rotation: Self::branch_features(&tape, &it.encoded[0][s]),
            translation: Self::branch_features(&tape, &it.encoded[1][s]),
            hybrid_r: tape.value(it.hybrid[0][s]).data().to_vec(),
            hybrid_t: tape.value(it.hybrid[1][s]).data().to_vec(),
        };
        (bundle(0), bundle(1))
    }

    /// Iterative registration of `source` onto `reference`.
    pub fn register(&self, source: &PointCloud<T>, reference: &PointCloud<T>) -> Result<RegistrationResult<T>> {
        let y_tensor = Tensor::from_cloud(reference);
        let mut acc = RigidTransform::identity();
        let mut result = RegistrationResult {
            per_iteration: Vec::new(),
            final_transform: acc,
            saliency_source: Vec::new(),
            saliency_reference: Vec::new(),
        };
        for iteration in 0..self.config.iterations {
            let moved = acc.apply(source);
            let mut tape = Tape::new();
            let bp = self.params.bind(&mut tape);
            let x = tape.constant(Tensor::from_cloud(&moved));
            let y = tape.constant(y_tensor.clone());
            let it = self.iteration_vars(&mut tape, &bp, x, y);
            let finite = it
                .encoded
                .iter()
                .flatten()
                .all(|e| tape.value(e.global).all_finite())
                && tape.value(it.rotation).all_finite()
                && tape.value(it.translation).all_finite();
            if !finite {
                return Err(Error::NonFiniteFeatures { iteration });
            }
            let step = transform_from_vars(&tape, it.rotation, it.translation);
            acc = step.compose(&acc);
            result.per_iteration.push(step);
            result.saliency_source.push(to_array3(tape.value(it.saliency[0]).data()));
            result.saliency_reference.push(to_array3(tape.value(it.saliency[1]).data()));
        }
        result.final_transform = acc;
        Ok(result)
    }
}

pub(crate) fn transform_from_vars<T: Scalar>(tape: &Tape<T>, q: Var, t: Var) -> RigidTransform<T> {
    let q = Quaternion::from_array(to_array4(tape.value(q).data()));
    RigidTransform {
        rotation: q.normalize().unwrap_or_else(|_| Quaternion::identity()),
        translation: to_array3(tape.value(t).data()),
    }
}

fn to_array4<T: Scalar>(d: &[T]) -> [T; 4] {
    [d[0], d[1], d[2], d[3]]
}

fn to_array3<T: Scalar>(d: &[T]) -> [T; 3] {
    [d[0], d[1], d[2]]
}

/// Number of global-feature channels each point supplies the maximum for.
/// Ties go to the lowest point index, so the counts sum to the feature width.
pub fn contribution_map<T: Scalar>(points: &PointCloud<T>, features: &BranchFeatures<T>) -> Result<Vec<usize>> {
    let n = points.len();
    let mut counts = vec![0usize; n];
    for f in &features.pointwise {
        if f.rows() != n {
            return Err(Error::shape("point-wise features", format!("{n} rows"), f.rows()));
        }
        for j in 0..f.cols() {
            let mut best = 0;
            for i in 1..n {
                if f.get(i, j) > f.get(best, j) {
                    best = i;
                }
            }
            counts[best] += 1;
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(seed: u64, n: usize) -> PointCloud<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::paper().validate().is_ok());
        let mut c = ModelConfig::test();
        c.pfi_positions = vec![1];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::test();
        c.block_channels = vec![8];
        c.pfi_positions.clear();
        assert!(c.validate().is_err());
        let mut c = ModelConfig::test();
        c.iterations = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn paper_widths_match_head_inputs() {
        let net = RegistrationNet::<f32>::new(ModelConfig::paper(), 0).unwrap();
        let p = net.params();
        let w = |name: &str| p.get(p.find(name).unwrap()).shape();
        assert_eq!(net.config().feature_dim(), 512);
        assert_eq!(w("rotation.gfi.layer1.weight"), (1024, 512));
        assert_eq!(w("rotation.gfi.layer2.weight"), (512, 512));
        assert_eq!(w("rotation.head.layer1.weight"), (2048, 512));
        assert_eq!(w("rotation.head.layer3.weight"), (256, 4));
        assert_eq!(w("translation.head.layer1.weight"), (1536, 512));
        assert_eq!(w("translation.head.layer3.weight"), (256, 3));
        assert_eq!(w("rotation.encoder.block3.weight"), (128, 128));
        assert_eq!(w("rotation.encoder.block2.weight"), (64, 64));
    }

    #[test]
    fn single_point_global_is_concat_of_features() {
        let net = RegistrationNet::<f64>::new(ModelConfig::test(), 1).unwrap();
        let c = cloud(2, 1);
        let f = net.encoder_forward(&c, None, Branch::Rotation).unwrap();
        let concat: Vec<f64> = f.pointwise.iter().flat_map(|t| t.row(0).to_vec()).collect();
        assert_eq!(f.global, concat);
    }

    #[test]
    fn summaries_shape_checked() {
        let net = RegistrationNet::<f64>::new(ModelConfig::test(), 1).unwrap();
        let c = cloud(2, 5);
        let bad = vec![vec![0.0; 3]; 4];
        assert!(matches!(net.encoder_forward(&c, Some(&bad), Branch::Rotation), Err(Error::Shape { .. })));
    }

    #[test]
    fn pfi_rejects_channel_mismatch_and_non_interaction_blocks() {
        let net = RegistrationNet::<f64>::new(ModelConfig::test(), 1).unwrap();
        let a = Tensor::zeros(4, 8);
        let b = Tensor::zeros(3, 9);
        assert!(matches!(net.pfi(Branch::Rotation, 3, &a, &b), Err(Error::Shape { .. })));
        assert!(net.pfi(Branch::Rotation, 2, &a, &a).is_err());
        assert!(net.pfi(Branch::Rotation, 3, &a, &Tensor::zeros(3, 8)).is_ok());
    }

    #[test]
    fn single_branch_shares_encoder() {
        let mut cfg = ModelConfig::test();
        cfg.dual_branch = false;
        let net = RegistrationNet::<f64>::new(cfg, 3).unwrap();
        let c = cloud(4, 6);
        let d = cloud(5, 7);
        let (a, _) = net.encode_pair(&c, &d, Branch::Rotation);
        let (b, _) = net.encode_pair(&c, &d, Branch::Translation);
        assert_eq!(a, b);
        assert!(net.branch_param_names(Branch::Translation).is_empty());
    }

    #[test]
    fn contribution_map_counts() {
        let net = RegistrationNet::<f64>::new(ModelConfig::test(), 1).unwrap();
        let one = cloud(2, 1);
        let f = net.encoder_forward(&one, None, Branch::Rotation).unwrap();
        assert_eq!(contribution_map(&one, &f).unwrap(), vec![48]);
        let c = cloud(3, 9);
        let f = net.encoder_forward(&c, None, Branch::Rotation).unwrap();
        assert_eq!(contribution_map(&c, &f).unwrap().iter().sum::<usize>(), 48);
    }

    #[test]
    fn register_single_iteration_equals_residual() {
        let mut cfg = ModelConfig::test();
        cfg.iterations = 1;
        let net = RegistrationNet::<f64>::new(cfg, 7).unwrap();
        let r = net.register(&cloud(1, 10), &cloud(2, 12)).unwrap();
        assert_eq!(r.per_iteration.len(), 1);
        let a = r.final_transform;
        let b = r.per_iteration[0].compose(&RigidTransform::identity());
        assert_eq!(a, b);
        assert!((a.rotation.norm() - 1.0).abs() < 1e-12);
    }
}
