//! Spatiotemporal patch tokenization of complex (S,T,H,W) volumes and the
//! visible/hidden token partitions used for masked pretraining.

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KmtrError, Result};
use crate::kspace::{AccelerationMask, ComplexVolume};

/// Patch extents and the (S,T,H,W) volume they tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGridSpec {
    pub patch: [usize; 3],
    pub volume: [usize; 4],
}

/// Position of a token in the (slice, t-block, h-block, w-block) grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenIndex {
    pub slice: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchGridSpec {
    pub fn new(patch: [usize; 3], volume: [usize; 4]) -> Result<Self> {
        let spec = Self { patch, volume };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let [_, t, h, w] = self.volume;
        for (axis, len, p) in [("T", t, self.patch[0]), ("H", h, self.patch[1]), ("W", w, self.patch[2])] {
            if p == 0 || len % p != 0 {
                return Err(KmtrError::NotDivisible { axis, len, patch: p });
            }
        }
        if self.volume.iter().any(|&d| d == 0) {
            return Err(KmtrError::InvalidConfig(format!("volume dims must be >= 1, got {:?}", self.volume)));
        }
        Ok(())
    }

    /// Blocks per slice along (t, h, w).
    pub fn grid(&self) -> [usize; 3] {
        [self.volume[1] / self.patch[0], self.volume[2] / self.patch[1], self.volume[3] / self.patch[2]]
    }

    pub fn tokens_per_slice(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn num_tokens(&self) -> usize {
        self.volume[0] * self.tokens_per_slice()
    }

    /// Voxels per patch in one channel.
    pub fn patch_voxels(&self) -> usize {
        self.patch.iter().product()
    }

    /// Real and imaginary channels.
    pub fn patch_dim(&self) -> usize {
        2 * self.patch_voxels()
    }

    pub fn token_index(&self, i: usize) -> TokenIndex {
        let [gt, gh, gw] = self.grid();
        TokenIndex { slice: i / (gt * gh * gw), t: (i / (gh * gw)) % gt, h: (i / gw) % gh, w: i % gw }
    }

    pub fn flat_index(&self, ix: TokenIndex) -> usize {
        let [gt, gh, gw] = self.grid();
        ((ix.slice * gt + ix.t) * gh + ix.h) * gw + ix.w
    }

    pub fn indices(&self) -> Vec<TokenIndex> {
        (0..self.num_tokens()).map(|i| self.token_index(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Image,
    Kspace,
}

/// Flattened patches (L × patch_dim) in slice-major token order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patches: Array2<f64>,
    pub index: Vec<TokenIndex>,
    pub visible_idx: Vec<usize>,
    pub hidden_idx: Vec<usize>,
    pub spec: PatchGridSpec,
    pub domain: Domain,
    /// True when the tokens come from fully sampled data.
    pub fully_sampled: bool,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }

    /// Assigns a partition after checking that it covers [0, L) without overlap.
    pub fn with_partition(mut self, visible: Vec<usize>, hidden: Vec<usize>) -> Result<Self> {
        check_partition(self.len(), &visible, &hidden)?;
        self.visible_idx = visible;
        self.hidden_idx = hidden;
        Ok(self)
    }

    pub fn all_visible(self) -> Self {
        let n = self.len();
        Self { visible_idx: (0..n).collect(), hidden_idx: Vec::new(), ..self }
    }
}

pub fn check_partition(l: usize, visible: &[usize], hidden: &[usize]) -> Result<()> {
    let mut seen = vec![false; l];
    for &i in visible.iter().chain(hidden) {
        if i >= l {
            return Err(KmtrError::InvalidConfig(format!("token index {i} out of range for L={l}")));
        }
        if seen[i] {
            return Err(KmtrError::PartitionOverlap(i));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(KmtrError::InvalidConfig("partition does not cover every token".into()));
    }
    Ok(())
}

/// Lossless rearrangement into patches. Within a patch the real channel comes
/// first, then the imaginary channel, each in (t, h, w) row-major order.
pub fn tokenize(x: &ComplexVolume, spec: &PatchGridSpec, domain: Domain, fully_sampled: bool) -> Result<PatchSequence> {
    spec.validate()?;
    if x.shape() != spec.volume {
        return Err(KmtrError::shape("tokenize", &spec.volume, &x.shape()));
    }
    let [tp, hp, wp] = spec.patch;
    let pv = spec.patch_voxels();
    let l = spec.num_tokens();
    let mut patches = Array2::<f64>::zeros((l, 2 * pv));
    for (i, mut row) in patches.rows_mut().into_iter().enumerate() {
        let ix = spec.token_index(i);
        let mut k = 0;
        for dt in 0..tp {
            for dh in 0..hp {
                for dw in 0..wp {
                    let z = x.get(ix.slice, ix.t * tp + dt, ix.h * hp + dh, ix.w * wp + dw);
                    row[k] = z.re;
                    row[pv + k] = z.im;
                    k += 1;
                }
            }
        }
    }
    Ok(PatchSequence {
        patches,
        index: spec.indices(),
        visible_idx: Vec::new(),
        hidden_idx: Vec::new(),
        spec: *spec,
        domain,
        fully_sampled,
    })
}

/// Exact inverse of [`tokenize`].
pub fn detokenize(p: &PatchSequence, spec: &PatchGridSpec) -> Result<ComplexVolume> {
    patches_to_volume(&p.patches, spec)
}

pub fn patches_to_volume(patches: &Array2<f64>, spec: &PatchGridSpec) -> Result<ComplexVolume> {
    spec.validate()?;
    let l = spec.num_tokens();
    if patches.nrows() != l || patches.ncols() != spec.patch_dim() {
        return Err(KmtrError::shape("detokenize", &[l, spec.patch_dim()], patches.shape()));
    }
    let [tp, hp, wp] = spec.patch;
    let pv = spec.patch_voxels();
    let mut out = ComplexVolume::zeros(spec.volume)?;
    for (i, row) in patches.rows().into_iter().enumerate() {
        let ix = spec.token_index(i);
        let mut k = 0;
        for dt in 0..tp {
            for dh in 0..hp {
                for dw in 0..wp {
                    let o = out.offset(ix.slice, ix.t * tp + dt, ix.h * hp + dh, ix.w * wp + dw);
                    out.data_mut()[o] = Complex64::new(row[k], row[pv + k]);
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Real-valued (L × patch_voxels) patches of a real volume; the imaginary
/// half of [`tokenize`] is dropped.
pub fn real_patches(values: &[f64], spec: &PatchGridSpec) -> Result<Array2<f64>> {
    let vol = ComplexVolume::from_real(spec.volume, values)?;
    let seq = tokenize(&vol, spec, Domain::Image, true)?;
    Ok(seq.patches.slice(ndarray::s![.., ..spec.patch_voxels()]).to_owned())
}

/// Inverse of [`real_patches`].
pub fn real_patches_to_volume(patches: &Array2<f64>, spec: &PatchGridSpec) -> Result<Vec<f64>> {
    let pv = spec.patch_voxels();
    if patches.ncols() != pv {
        return Err(KmtrError::shape("real_patches_to_volume", &[spec.num_tokens(), pv], patches.shape()));
    }
    let mut full = Array2::<f64>::zeros((patches.nrows(), 2 * pv));
    full.slice_mut(ndarray::s![.., ..pv]).assign(patches);
    Ok(patches_to_volume(&full, spec)?.real_part())
}

/// Uniform random hidden set of size round(mask_ratio · L).
pub fn random_visible_partition(l: usize, mask_ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(KmtrError::InvalidConfig(format!("mask ratio must be in [0, 1), got {mask_ratio}")));
    }
    let n_hidden = (mask_ratio * l as f64).round() as usize;
    let mut perm: Vec<usize> = (0..l).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut hidden = perm[..n_hidden].to_vec();
    let mut visible = perm[n_hidden..].to_vec();
    hidden.sort_unstable();
    visible.sort_unstable();
    Ok((visible, hidden))
}

fn check_mask(mask: &AccelerationMask, spec: &PatchGridSpec) -> Result<()> {
    let [s, t, _, w] = spec.volume;
    if mask.shape != [s, t, w] {
        return Err(KmtrError::shape("mask_visible_partition", &[s, t, w], &mask.shape));
    }
    Ok(())
}

/// Partition for one slice, as indices into the full sequence. A token is
/// visible iff at least one of its frames samples at least one of its columns.
pub fn mask_visible_partition(mask: &AccelerationMask, spec: &PatchGridSpec, slice: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    check_mask(mask, spec)?;
    if slice >= spec.volume[0] {
        return Err(KmtrError::InvalidConfig(format!("slice {slice} out of range")));
    }
    let [tp, _, wp] = spec.patch;
    let [gt, gh, gw] = spec.grid();
    let mut visible = Vec::new();
    let mut hidden = Vec::new();
    for bt in 0..gt {
        for bh in 0..gh {
            for bw in 0..gw {
                let sampled = (bt * tp..(bt + 1) * tp).any(|t| (bw * wp..(bw + 1) * wp).any(|c| mask.get(slice, t, c)));
                let i = spec.flat_index(TokenIndex { slice, t: bt, h: bh, w: bw });
                if sampled {
                    visible.push(i);
                } else {
                    hidden.push(i);
                }
            }
        }
    }
    Ok((visible, hidden))
}

/// Concatenation of the per-slice partitions over all slices.
pub fn mask_partition(mask: &AccelerationMask, spec: &PatchGridSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    check_mask(mask, spec)?;
    let mut visible = Vec::new();
    let mut hidden = Vec::new();
    for s in 0..spec.volume[0] {
        let (v, h) = mask_visible_partition(mask, spec, s)?;
        visible.extend(v);
        hidden.extend(h);
    }
    Ok((visible, hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{center_columns, make_mask, MaskParams};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_volume(shape: [usize; 4], seed: u64) -> ComplexVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        ComplexVolume::from_vec(shape, (0..n).map(|_| Complex64::new(rng.gen(), rng.gen())).collect()).unwrap()
    }

    #[test]
    fn token_count_and_dim() {
        let spec = PatchGridSpec::new([4, 8, 8], [3, 16, 64, 64]).unwrap();
        assert_eq!(spec.num_tokens(), 768);
        assert_eq!(spec.patch_dim(), 512);
        let x = random_volume([3, 16, 64, 64], 0);
        let p = tokenize(&x, &spec, Domain::Kspace, true).unwrap();
        assert_eq!(p.patches.dim(), (768, 512));
    }

    #[test]
    fn non_divisible_names_axis() {
        match PatchGridSpec::new([5, 8, 8], [1, 16, 64, 64]) {
            Err(KmtrError::NotDivisible { axis, .. }) => assert_eq!(axis, "T"),
            other => panic!("{other:?}"),
        }
        match PatchGridSpec::new([4, 8, 6], [1, 16, 64, 64]) {
            Err(KmtrError::NotDivisible { axis, .. }) => assert_eq!(axis, "W"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn real_input_has_zero_imaginary_half() {
        let spec = PatchGridSpec::new([2, 4, 4], [1, 4, 8, 8]).unwrap();
        let vals: Vec<f64> = (0..256).map(|i| i as f64).collect();
        let p = tokenize(&ComplexVolume::from_real([1, 4, 8, 8], &vals).unwrap(), &spec, Domain::Image, true).unwrap();
        assert!(p.patches.slice(ndarray::s![.., 32..]).iter().all(|&v| v == 0.0));
        let back = real_patches_to_volume(&real_patches(&vals, &spec).unwrap(), &spec).unwrap();
        assert_eq!(back, vals);
    }

    #[test]
    fn zero_patches_give_zero_volume() {
        let spec = PatchGridSpec::new([2, 2, 2], [2, 4, 4, 4]).unwrap();
        let v = patches_to_volume(&Array2::zeros((spec.num_tokens(), spec.patch_dim())), &spec).unwrap();
        assert!(v.data().iter().all(|z| z.re == 0.0 && z.im == 0.0));
        assert!(patches_to_volume(&Array2::zeros((3, spec.patch_dim())), &spec).is_err());
    }

    #[test]
    fn swapping_tokens_swaps_blocks() {
        let spec = PatchGridSpec::new([2, 2, 2], [1, 4, 4, 4]).unwrap();
        let x = random_volume([1, 4, 4, 4], 5);
        let mut p = tokenize(&x, &spec, Domain::Image, true).unwrap();
        let (a, b) = (1usize, 6usize);
        let ra = p.patches.row(a).to_owned();
        let rb = p.patches.row(b).to_owned();
        p.patches.row_mut(a).assign(&rb);
        p.patches.row_mut(b).assign(&ra);
        let y = detokenize(&p, &spec).unwrap();
        let (ia, ib) = (spec.token_index(a), spec.token_index(b));
        let block = |v: &ComplexVolume, ix: TokenIndex| -> Vec<Complex64> {
            let mut out = vec![];
            for dt in 0..2 {
                for dh in 0..2 {
                    for dw in 0..2 {
                        out.push(v.get(0, ix.t * 2 + dt, ix.h * 2 + dh, ix.w * 2 + dw));
                    }
                }
            }
            out
        };
        assert_eq!(block(&y, ia), block(&x, ib));
        assert_eq!(block(&y, ib), block(&x, ia));
        let mut changed = 0;
        for (u, v) in x.data().iter().zip(y.data()) {
            changed += (u != v) as usize;
        }
        assert_eq!(changed, 16);
    }

    #[test]
    fn random_partition_counts() {
        let (v, h) = random_visible_partition(768, 0.70, 3).unwrap();
        assert_eq!((v.len(), h.len()), (230, 538));
        check_partition(768, &v, &h).unwrap();
        let (v, h) = random_visible_partition(10, 0.0, 3).unwrap();
        assert!(h.is_empty() && v.len() == 10);
        assert!(random_visible_partition(10, 1.0, 0).is_err());
        assert_eq!(random_visible_partition(50, 0.5, 9).unwrap(), random_visible_partition(50, 0.5, 9).unwrap());
    }

    #[test]
    fn random_partition_is_uniform() {
        let l = 20;
        let mut counts = vec![0usize; l];
        let draws = 10_000;
        for seed in 0..draws {
            for i in random_visible_partition(l, 0.7, seed).unwrap().1 {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.7).abs() <= 0.02, "{f}");
        }
    }

    #[test]
    fn mask_partition_extremes() {
        let spec = PatchGridSpec::new([4, 8, 8], [2, 8, 16, 32]).unwrap();
        let (v, h) = mask_partition(&AccelerationMask::full(2, 8, 32), &spec).unwrap();
        assert_eq!((v.len(), h.len()), (spec.num_tokens(), 0));
        let (v, h) = mask_partition(&AccelerationMask::empty(2, 8, 32), &spec).unwrap();
        assert_eq!((v.len(), h.len()), (0, spec.num_tokens()));
        assert!(mask_partition(&AccelerationMask::full(2, 8, 31), &spec).is_err());
    }

    #[test]
    fn center_block_always_visible() {
        let spec = PatchGridSpec::new([4, 8, 8], [3, 16, 64, 64]).unwrap();
        let center_block = center_columns(64, 4).start / 8;
        for seed in 0..20 {
            let m = make_mask(3, 16, 64, MaskParams { r: 8.0, center_lines: 4, density_sigma: 0.25 }, seed).unwrap();
            for s in 0..3 {
                let (v, _) = mask_visible_partition(&m, &spec, s).unwrap();
                for bt in 0..4 {
                    for bh in 0..8 {
                        let i = spec.flat_index(TokenIndex { slice: s, t: bt, h: bh, w: center_block });
                        assert!(v.contains(&i));
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            s in 1usize..3, gt in 1usize..3, gh in 1usize..3, gw in 1usize..3,
            tp in 1usize..3, hp in 1usize..4, wp in 1usize..4, seed in 0u64..500,
        ) {
            let shape = [s, gt * tp, gh * hp, gw * wp];
            let spec = PatchGridSpec::new([tp, hp, wp], shape).unwrap();
            let x = random_volume(shape, seed);
            let p = tokenize(&x, &spec, Domain::Kspace, false).unwrap();
            prop_assert_eq!(p.len(), s * gt * gh * gw);
            prop_assert_eq!(&detokenize(&p, &spec).unwrap(), &x);
            // patches -> volume -> patches
            let again = tokenize(&detokenize(&p, &spec).unwrap(), &spec, Domain::Kspace, false).unwrap();
            prop_assert_eq!(again.patches, p.patches);
        }

        #[test]
        fn adding_columns_never_shrinks_visibility(seed in 0u64..200, extra in 0usize..32, frame in 0usize..8) {
            let spec = PatchGridSpec::new([4, 8, 8], [1, 8, 8, 32]).unwrap();
            let m = make_mask(1, 8, 32, MaskParams { r: 8.0, center_lines: 2, density_sigma: 0.25 }, seed).unwrap();
            let mut more = m.clone();
            more.set(0, frame, extra, true);
            let (v0, h0) = mask_partition(&m, &spec).unwrap();
            let (v1, _) = mask_partition(&more, &spec).unwrap();
            prop_assert!(v0.iter().all(|i| v1.contains(i)));
            check_partition(spec.num_tokens(), &v0, &h0).unwrap();
        }
    }
}
