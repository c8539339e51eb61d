//! Patch segmentation, 3D token indexing, the shared linear tokenizer and
//! token masking.
//!
//! Tokens are ordered band-major, then channel, then time patch: the token
//! for `(f, c, l)` sits at `(f·C + c)·L + l`. A window stored as an
//! `F×C×T` array with `T = L·w` is therefore already in token order once
//! reshaped to `(F·C·L)×w`.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_mat, Mat, ParamId, ParamSet, Tape, Var};
use crate::sigproc::BandStack;

pub const DEFAULT_PATCH_LEN: usize = 100;
/// Patch lengths (samples at 200 Hz) covered by the patch-size study.
pub const SUPPORTED_PATCH_LENS: [usize; 4] = [50, 100, 200, 400];
pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_MASK_RATIO: f64 = 0.5;

/// Shape of the token grid and the mixed-radix map between flat token
/// positions and `(f, c, l)` coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenIndex {
    pub bands: usize,
    pub channels: usize,
    pub patches: usize,
}

impl TokenIndex {
    pub fn new(bands: usize, channels: usize, patches: usize) -> Self {
        Self {
            bands,
            channels,
            patches,
        }
    }

    pub fn len(&self) -> usize {
        self.bands * self.channels * self.patches
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, f: usize, c: usize, l: usize) -> usize {
        debug_assert!(f < self.bands && c < self.channels && l < self.patches);
        (f * self.channels + c) * self.patches + l
    }

    pub fn coords(&self, pos: usize) -> (usize, usize, usize) {
        let l = pos % self.patches;
        let c = (pos / self.patches) % self.channels;
        let f = pos / (self.patches * self.channels);
        (f, c, l)
    }

    pub fn band_of(&self) -> Vec<usize> {
        (0..self.len()).map(|p| self.coords(p).0).collect()
    }

    pub fn channel_of(&self) -> Vec<usize> {
        (0..self.len()).map(|p| self.coords(p).1).collect()
    }

    pub fn patch_of(&self) -> Vec<usize> {
        (0..self.len()).map(|p| self.coords(p).2).collect()
    }
}

/// Bands × channels × patches × samples-per-patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Array4<f64>,
    pub fs: f64,
}

impl PatchGrid {
    pub fn index(&self) -> TokenIndex {
        let (f, c, l, _) = self.patches.dim();
        TokenIndex::new(f, c, l)
    }

    pub fn patch_len(&self) -> usize {
        self.patches.dim().3
    }

    /// Patches as an `N×w` matrix in token order.
    pub fn token_matrix(&self) -> Array2<f64> {
        let n = self.index().len();
        let w = self.patch_len();
        let flat: Vec<f64> = self.patches.iter().copied().collect();
        Array2::from_shape_vec((n, w), flat).expect("token matrix shape")
    }

    pub fn from_token_matrix(index: TokenIndex, tokens: Array2<f64>, fs: f64) -> Result<Self> {
        if tokens.nrows() != index.len() {
            return Err(Error::Shape(format!(
                "{} token rows for a grid of {} tokens",
                tokens.nrows(),
                index.len()
            )));
        }
        let w = tokens.ncols();
        let flat: Vec<f64> = tokens.iter().copied().collect();
        let patches = Array4::from_shape_vec((index.bands, index.channels, index.patches, w), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { patches, fs })
    }

    /// Concatenate patches back along time: bands × channels × (L·w).
    pub fn concat(&self) -> Array3<f64> {
        let (f, c, l, w) = self.patches.dim();
        let flat: Vec<f64> = self.patches.iter().copied().collect();
        Array3::from_shape_vec((f, c, l * w), flat).expect("concat shape")
    }
}

/// Split every band-channel series into non-overlapping patches of `w` samples.
pub fn segment(window: &BandStack, w: usize) -> Result<PatchGrid> {
    segment_array(&window.data, w, window.fs)
}

pub fn segment_array(data: &Array3<f64>, w: usize, fs: f64) -> Result<PatchGrid> {
    let (f, c, t) = data.dim();
    if w == 0 || t % w != 0 {
        return Err(Error::InvalidPatchSize { len: t, patch: w });
    }
    let flat: Vec<f64> = data.iter().copied().collect();
    let patches = Array4::from_shape_vec((f, c, t / w, w), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(PatchGrid { patches, fs })
}

/// Plain-array view of the tokenizer's learnable state.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerParams {
    /// `w×d`, shared by every token.
    pub projection: Array2<f64>,
    pub bias: Array1<f64>,
    pub pos_band: Array2<f64>,
    pub pos_channel: Array2<f64>,
    pub pos_patch: Array2<f64>,
    /// Substituted for masked patches before projection.
    pub mask_patch: Array1<f64>,
}

impl TokenizerParams {
    pub fn zeros(index: TokenIndex, w: usize, d: usize) -> Self {
        Self {
            projection: Array2::zeros((w, d)),
            bias: Array1::zeros(d),
            pos_band: Array2::zeros((index.bands, d)),
            pos_channel: Array2::zeros((index.channels, d)),
            pos_patch: Array2::zeros((index.patches, d)),
            mask_patch: Array1::zeros(w),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Array2<f64>,
    pub index: TokenIndex,
}

/// Shared linear projection of each patch, without positional terms.
pub fn project(grid: &PatchGrid, params: &TokenizerParams) -> Result<Array2<f64>> {
    if params.projection.nrows() != grid.patch_len() {
        return Err(Error::Shape(format!(
            "tokenizer expects patches of {} samples, got {}",
            params.projection.nrows(),
            grid.patch_len()
        )));
    }
    Ok(grid.token_matrix().dot(&params.projection) + &params.bias)
}

/// Embed every patch: shared projection plus band, channel and time tables.
pub fn embed(grid: &PatchGrid, params: &TokenizerParams) -> Result<TokenSequence> {
    let index = grid.index();
    let d = params.dim();
    let tables = [
        (&params.pos_band, index.bands, "band"),
        (&params.pos_channel, index.channels, "channel"),
        (&params.pos_patch, index.patches, "patch"),
    ];
    for (table, rows, axis) in tables {
        if table.dim() != (rows, d) {
            return Err(Error::Shape(format!(
                "{axis} table is {:?}, grid needs ({rows}, {d})",
                table.dim()
            )));
        }
    }
    let mut embeddings = project(grid, params)?;
    for (pos, mut row) in embeddings.rows_mut().into_iter().enumerate() {
        let (f, c, l) = index.coords(pos);
        row += &params.pos_band.row(f);
        row += &params.pos_channel.row(c);
        row += &params.pos_patch.row(l);
    }
    Ok(TokenSequence { embeddings, index })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Exactly `round(ratio·N)` tokens chosen uniformly.
    UniformToken,
    /// Whole band, channel or time slices until the ratio is reached.
    AxisStructured,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    pub mode: MaskMode,
    pub seed: u64,
}

impl MaskSpec {
    pub fn uniform(ratio: f64, seed: u64) -> Self {
        Self {
            ratio,
            mode: MaskMode::UniformToken,
            seed,
        }
    }

    pub fn target_count(&self, n: usize) -> usize {
        (self.ratio * n as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskResult {
    pub corrupted: PatchGrid,
    /// bands × channels × patches, `true` where masked.
    pub mask: Array3<bool>,
}

/// Draw a token mask in token order.
pub fn sample_mask(index: TokenIndex, spec: &MaskSpec) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&spec.ratio) {
        return Err(Error::InvalidParameter(format!(
            "mask ratio must lie in [0, 1], got {}",
            spec.ratio
        )));
    }
    let n = index.len();
    let target = spec.target_count(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = vec![false; n];
    match spec.mode {
        MaskMode::UniformToken => {
            for i in rand::seq::index::sample(&mut rng, n, target) {
                mask[i] = true;
            }
        }
        MaskMode::AxisStructured => {
            #[derive(Clone, Copy)]
            enum Slice {
                Band(usize),
                Channel(usize),
                Patch(usize),
            }
            let mut slices: Vec<Slice> = (0..index.bands)
                .map(Slice::Band)
                .chain((0..index.channels).map(Slice::Channel))
                .chain((0..index.patches).map(Slice::Patch))
                .collect();
            slices.shuffle(&mut rng);
            let mut count = 0;
            for s in slices {
                if count >= target {
                    break;
                }
                for (pos, m) in mask.iter_mut().enumerate() {
                    let (f, c, l) = index.coords(pos);
                    let hit = match s {
                        Slice::Band(x) => f == x,
                        Slice::Channel(x) => c == x,
                        Slice::Patch(x) => l == x,
                    };
                    if hit && !*m {
                        *m = true;
                        count += 1;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Mask patches per `spec`, substituting `mask_patch` for each masked patch.
pub fn apply_mask(grid: &PatchGrid, spec: &MaskSpec, mask_patch: ArrayView1<f64>) -> Result<MaskResult> {
    let index = grid.index();
    if mask_patch.len() != grid.patch_len() {
        return Err(Error::Shape(format!(
            "mask patch has {} samples, patches have {}",
            mask_patch.len(),
            grid.patch_len()
        )));
    }
    let flags = sample_mask(index, spec)?;
    let mut tokens = grid.token_matrix();
    for (mut row, &m) in tokens.rows_mut().into_iter().zip(&flags) {
        if m {
            row.assign(&mask_patch);
        }
    }
    let corrupted = PatchGrid::from_token_matrix(index, tokens, grid.fs)?;
    let mask = Array3::from_shape_vec((index.bands, index.channels, index.patches), flags)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(MaskResult { corrupted, mask })
}

/// Tokenizer parameters registered in a [`ParamSet`] for training.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub index: TokenIndex,
    pub patch_len: usize,
    pub dim: usize,
    projection: ParamId,
    bias: ParamId,
    pos_band: ParamId,
    pos_channel: ParamId,
    pos_patch: ParamId,
    mask_patch: ParamId,
    band_of: Vec<usize>,
    channel_of: Vec<usize>,
    patch_of: Vec<usize>,
}

impl Tokenizer {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        index: TokenIndex,
        patch_len: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let proj_std = 1.0 / (patch_len as f64).sqrt();
        let pos_std = 0.1;
        Self {
            index,
            patch_len,
            dim,
            projection: params.add("tokenizer.projection", normal_mat(rng, patch_len, dim, proj_std), true),
            bias: params.add("tokenizer.bias", Mat::zeros((1, dim)), false),
            pos_band: params.add("tokenizer.pos_band", normal_mat(rng, index.bands, dim, pos_std), false),
            pos_channel: params.add(
                "tokenizer.pos_channel",
                normal_mat(rng, index.channels, dim, pos_std),
                false,
            ),
            pos_patch: params.add(
                "tokenizer.pos_patch",
                normal_mat(rng, index.patches, dim, pos_std),
                false,
            ),
            mask_patch: params.add("tokenizer.mask_patch", Mat::zeros((1, patch_len)), false),
            band_of: index.band_of(),
            channel_of: index.channel_of(),
            patch_of: index.patch_of(),
        }
    }

    /// Record the embedding of an `N×w` patch matrix; masked rows are
    /// replaced by the learnable mask patch before projection.
    pub fn forward(&self, tape: &mut Tape, patches: Var, mask: Option<&[bool]>) -> Var {
        let mut x = patches;
        if let Some(mask) = mask {
            let row = tape.param(self.mask_patch);
            x = tape.replace_rows(x, row, mask.to_vec());
        }
        let projected = tape.linear(x, self.projection, Some(self.bias));
        let tables = [
            (self.pos_band, &self.band_of),
            (self.pos_channel, &self.channel_of),
            (self.pos_patch, &self.patch_of),
        ];
        let mut out = projected;
        for (table, idx) in tables {
            let t = tape.param(table);
            let rows = tape.gather_rows(t, idx.clone());
            out = tape.add(out, rows);
        }
        out
    }

    pub fn snapshot(&self, params: &ParamSet) -> TokenizerParams {
        let row = |id: ParamId| params.get(id).row(0).to_owned();
        TokenizerParams {
            projection: params.get(self.projection).clone(),
            bias: row(self.bias),
            pos_band: params.get(self.pos_band).clone(),
            pos_channel: params.get(self.pos_channel).clone(),
            pos_patch: params.get(self.pos_patch).clone(),
            mask_patch: row(self.mask_patch),
        }
    }

    pub fn mask_patch(&self, params: &ParamSet) -> Array1<f64> {
        params.get(self.mask_patch).row(0).to_owned()
    }

    pub fn pos_band_id(&self) -> ParamId {
        self.pos_band
    }

    pub fn projection_id(&self) -> ParamId {
        self.projection
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [
            self.projection,
            self.bias,
            self.pos_band,
            self.pos_channel,
            self.pos_patch,
            self.mask_patch,
        ]
    }
}

/// Token-order patch matrix of a window (bands × channels × samples).
pub fn window_tokens(window: &Array3<f64>, w: usize) -> Result<Array2<f64>> {
    let (f, c, t) = window.dim();
    if w == 0 || t % w != 0 {
        return Err(Error::InvalidPatchSize { len: t, patch: w });
    }
    let flat: Vec<f64> = window.iter().copied().collect();
    Array2::from_shape_vec((f * c * (t / w), w), flat).map_err(|e| Error::Shape(e.to_string()))
}
