//! Residual k-means item tokenizer.
//!
//! Each level fits a k-means codebook on the residuals left by the previous
//! levels; an item's code at a level is the index of the centroid nearest to
//! its residual. Items that still share a full code sequence afterwards get an
//! extra disambiguation level so every item decodes to exactly one sequence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major item embedding table. Row `i` belongs to item id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "embedding buffer has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite embedding value at item {} dim {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Data("embedding rows have differing dimensions".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Reads a headered whitespace/tab separated table: `item_id v1 .. vd`.
    /// Item ids must cover `0..rows` exactly once, in any order.
    pub fn load_table(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut cols = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            if idx == 0 || line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            };
            let mut fields = line.split_whitespace();
            let id: usize = fields
                .next()
                .unwrap()
                .parse()
                .map_err(|e| parse_err(format!("bad item id: {e}")))?;
            let values = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("bad value: {e}")))?;
            match cols {
                None => cols = Some(values.len()),
                Some(c) if c != values.len() => {
                    return Err(parse_err(format!("expected {c} values, found {}", values.len())))
                }
                _ => {}
            }
            if rows.insert(id, values).is_some() {
                return Err(parse_err(format!("duplicate item id {id}")));
            }
        }
        let cols = cols.ok_or_else(|| Error::Data(format!("{} has no rows", path.display())))?;
        if rows.keys().enumerate().any(|(i, &id)| i != id) {
            return Err(Error::Data("embedding item ids must be contiguous from 0".into()));
        }
        let n = rows.len();
        Self::new(n, cols, rows.into_values().flatten().collect())
    }

    pub fn save_table(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        let header: Vec<String> = (0..self.cols).map(|j| format!("e{j}")).collect();
        writeln!(out, "item_id\t{}", header.join("\t"))?;
        for i in 0..self.rows {
            let vals: Vec<String> = self.row(i).iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{i}\t{}", vals.join("\t"))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a raw little-endian f32 matrix. Shape comes from a sidecar file
    /// `<path>.shape` holding `rows cols`.
    pub fn load_raw_f32(path: &Path) -> Result<Self> {
        let shape_path = shape_path(path);
        let shape = fs::read_to_string(&shape_path)?;
        let dims: Vec<usize> = shape
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: shape_path.clone(),
                line: 1,
                message: format!("bad shape: {e}"),
            })?;
        let [rows, cols] = dims[..] else {
            return Err(Error::Parse {
                path: shape_path,
                line: 1,
                message: "expected `rows cols`".into(),
            });
        };
        let bytes = fs::read(path)?;
        if bytes.len() != rows * cols * 4 {
            return Err(Error::Data(format!(
                "{} holds {} bytes, expected {}",
                path.display(),
                bytes.len(),
                rows * cols * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(rows, cols, data)
    }

    pub fn save_raw_f32(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(path, bytes)?;
        fs::write(shape_path(path), format!("{} {}\n", self.rows, self.cols))?;
        Ok(())
    }
}

fn shape_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".shape");
    s.into()
}

/// Per-level centroid matrices, each `codebook_size x dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub dim: usize,
    pub codebook_size: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
}

impl Codebooks {
    pub fn levels(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroid(&self, level: usize, k: usize) -> &[f64] {
        &self.centroids[level][k * self.dim..(k + 1) * self.dim]
    }

    /// Nearest centroid at `level`; equidistant centroids resolve to the lowest index.
    pub fn nearest(&self, level: usize, v: &[f64]) -> usize {
        nearest(&self.centroids[level], self.dim, v).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[f64], dim: usize, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's algorithm with farthest-point seeding. `points` is row-major `n x dim`.
fn kmeans(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng, max_iters: usize) -> Vec<f64> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    for _ in 1..k {
        let mut far = 0;
        for i in 1..n {
            if min_d[i] > min_d[far] {
                far = i;
            }
        }
        centroids.extend_from_slice(point(far));
        for i in 0..n {
            min_d[i] = min_d[i].min(sq_dist(point(i), point(far)));
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    for _ in 0..max_iters {
        let prev = assign.clone();
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let (c, d) = nearest(&centroids, dim, point(i));
            assign[i] = c;
            dist[i] = d;
            counts[c] += 1;
        }
        // Empty clusters take the point farthest from its own centroid.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut donor: Option<usize> = None;
            for i in 0..n {
                if counts[assign[i]] > 1 && donor.is_none_or(|j| dist[i] > dist[j]) {
                    donor = Some(i);
                }
            }
            if let Some(i) = donor {
                counts[assign[i]] -= 1;
                assign[i] = c;
                dist[i] = 0.0;
                counts[c] = 1;
            }
        }
        let mut sums = vec![0.0; k * dim];
        for i in 0..n {
            let c = assign[i];
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        if assign == prev {
            break;
        }
    }
    centroids
}

/// Fits one k-means codebook per level on successive residuals.
pub fn fit_codebooks(
    embeddings: &EmbeddingMatrix,
    levels: usize,
    codebook_size: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Codebooks> {
    if levels == 0 {
        return Err(Error::Config("tokenizer.levels must be >= 1".into()));
    }
    if codebook_size < 2 {
        return Err(Error::Config("tokenizer.codebook_size must be >= 2".into()));
    }
    if embeddings.rows() < codebook_size {
        return Err(Error::Config(format!(
            "codebook_size {codebook_size} exceeds item count {}",
            embeddings.rows()
        )));
    }
    let dim = embeddings.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residuals = embeddings.as_slice().to_vec();
    let mut centroids = Vec::with_capacity(levels);
    for _ in 0..levels {
        let level = kmeans(&residuals, dim, codebook_size, &mut rng, max_iters.max(1));
        for r in residuals.chunks_exact_mut(dim) {
            let (c, _) = nearest(&level, dim, r);
            for (x, m) in r.iter_mut().zip(&level[c * dim..(c + 1) * dim]) {
                *x -= m;
            }
        }
        centroids.push(level);
    }
    Ok(Codebooks {
        dim,
        codebook_size,
        seed,
        centroids,
    })
}

/// Per-item residual vectors after each level: `out[level][item]`.
pub fn residual_trajectory(embeddings: &EmbeddingMatrix, codebooks: &Codebooks) -> Vec<Vec<Vec<f64>>> {
    let mut current: Vec<Vec<f64>> = (0..embeddings.rows()).map(|i| embeddings.row(i).to_vec()).collect();
    let mut out = Vec::with_capacity(codebooks.levels());
    for level in 0..codebooks.levels() {
        for r in current.iter_mut() {
            let c = codebooks.nearest(level, r);
            for (x, m) in r.iter_mut().zip(codebooks.centroid(level, c)) {
                *x -= m;
            }
        }
        out.push(current.clone());
    }
    out
}

/// Fixed-length code sequences for every catalog item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCatalog {
    depth: usize,
    codes: Vec<u32>,
    vocab_sizes: Vec<usize>,
    dedup_level_present: bool,
}

impl TokenizedCatalog {
    /// Builds a catalog from explicit code sequences, validating ranges and uniqueness.
    pub fn from_codes(codes: &[Vec<u32>], vocab_sizes: Vec<usize>, dedup_level_present: bool) -> Result<Self> {
        let depth = vocab_sizes.len();
        if depth == 0 || codes.is_empty() {
            return Err(Error::Data("catalog needs at least one item and one level".into()));
        }
        for (item, seq) in codes.iter().enumerate() {
            if seq.len() != depth {
                return Err(Error::Data(format!("item {item} has {} codes, expected {depth}", seq.len())));
            }
            for (t, &c) in seq.iter().enumerate() {
                if c as usize >= vocab_sizes[t] {
                    return Err(Error::Data(format!(
                        "item {item} code {c} at level {} outside vocab {}",
                        t + 1,
                        vocab_sizes[t]
                    )));
                }
            }
        }
        let mut seen: BTreeMap<&[u32], usize> = BTreeMap::new();
        for (item, seq) in codes.iter().enumerate() {
            if let Some(other) = seen.insert(seq.as_slice(), item) {
                return Err(Error::Data(format!("items {other} and {item} share a code sequence")));
            }
        }
        Ok(Self {
            depth,
            codes: codes.concat(),
            vocab_sizes,
            dedup_level_present,
        })
    }

    pub fn num_items(&self) -> usize {
        self.codes.len() / self.depth
    }

    /// Code sequence length T.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn codes(&self, item: usize) -> &[u32] {
        &self.codes[item * self.depth..(item + 1) * self.depth]
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn dedup_level_present(&self) -> bool {
        self.dedup_level_present
    }

    /// Writes `item_id<TAB>c1 c2 ... cT` lines.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for item in 0..self.num_items() {
            let codes: Vec<String> = self.codes(item).iter().map(u32::to_string).collect();
            writeln!(out, "{item}\t{}", codes.join(" "))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the `item_id<TAB>codes` format. Vocab sizes are inferred as
    /// `max code + 1` per level unless the caller supplies them.
    pub fn read_tsv(path: &Path, vocab_sizes: Option<Vec<usize>>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut rows: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            let (id, rest) = line.split_once('\t').ok_or_else(|| parse_err("missing tab".into()))?;
            let id: usize = id.trim().parse().map_err(|e| parse_err(format!("bad item id: {e}")))?;
            let codes = rest
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<Vec<u32>, _>>()
                .map_err(|e| parse_err(format!("bad code: {e}")))?;
            rows.insert(id, codes);
        }
        if rows.keys().enumerate().any(|(i, &id)| i != id) {
            return Err(Error::Data("catalog item ids must be contiguous from 0".into()));
        }
        let codes: Vec<Vec<u32>> = rows.into_values().collect();
        let depth = codes.first().map_or(0, Vec::len);
        let vocab = vocab_sizes.unwrap_or_else(|| {
            (0..depth)
                .map(|t| codes.iter().map(|c| c.get(t).copied().unwrap_or(0) as usize + 1).max().unwrap_or(1))
                .collect()
        });
        Self::from_codes(&codes, vocab, false)
    }
}

/// Assigns every item its nearest-centroid code per level, appending a
/// disambiguation level when full sequences collide.
pub fn tokenize(embeddings: &EmbeddingMatrix, codebooks: &Codebooks) -> Result<TokenizedCatalog> {
    if embeddings.cols() != codebooks.dim {
        return Err(Error::Config(format!(
            "embedding dim {} does not match codebook dim {}",
            embeddings.cols(),
            codebooks.dim
        )));
    }
    let levels = codebooks.levels();
    let mut codes: Vec<Vec<u32>> = Vec::with_capacity(embeddings.rows());
    for i in 0..embeddings.rows() {
        let mut r = embeddings.row(i).to_vec();
        let mut seq = Vec::with_capacity(levels + 1);
        for level in 0..levels {
            let c = codebooks.nearest(level, &r);
            for (x, m) in r.iter_mut().zip(codebooks.centroid(level, c)) {
                *x -= m;
            }
            seq.push(c as u32);
        }
        codes.push(seq);
    }

    let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for (item, seq) in codes.iter().enumerate() {
        groups.entry(seq.clone()).or_default().push(item);
    }
    let largest = groups.values().map(Vec::len).max().unwrap_or(1);
    let mut vocab_sizes = vec![codebooks.codebook_size; levels];
    let dedup = largest > 1;
    if dedup {
        let mut extra = vec![0u32; codes.len()];
        for members in groups.values() {
            // members are already ascending by item id
            for (rank, &item) in members.iter().enumerate() {
                extra[item] = rank as u32;
            }
        }
        for (seq, e) in codes.iter_mut().zip(extra) {
            seq.push(e);
        }
        vocab_sizes.push(largest);
    }
    TokenizedCatalog::from_codes(&codes, vocab_sizes, dedup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_points(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        EmbeddingMatrix::new(n, dim, data).unwrap()
    }

    #[test]
    fn identical_rows_have_zero_residuals() {
        let emb = EmbeddingMatrix::from_rows(&vec![vec![1.5, -2.0, 0.25]; 4]).unwrap();
        let cb = fit_codebooks(&emb, 3, 2, 11, 20).unwrap();
        assert!((0..2).any(|k| cb.centroid(0, k) == emb.row(0)));
        for level in residual_trajectory(&emb, &cb) {
            for r in level {
                assert!(r.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn exact_cover_has_zero_error() {
        let emb = random_points(6, 3, 5);
        let cb = fit_codebooks(&emb, 1, 6, 1, 50).unwrap();
        let res = residual_trajectory(&emb, &cb);
        for r in &res[0] {
            assert!(r.iter().all(|x| x.abs() < 1e-12));
        }
        let cat = tokenize(&emb, &cb).unwrap();
        let mut first: Vec<u32> = (0..6).map(|i| cat.codes(i)[0]).collect();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4, 5]);
        assert!(!cat.dedup_level_present());
    }

    #[test]
    fn forced_collision_appends_level() {
        let emb = EmbeddingMatrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![5.0, 5.0],
            vec![9.0, -3.0],
        ])
        .unwrap();
        let cb = fit_codebooks(&emb, 2, 2, 3, 20).unwrap();
        let cat = tokenize(&emb, &cb).unwrap();
        assert_eq!(cat.depth(), 3);
        assert!(cat.dedup_level_present());
        assert_eq!(cat.codes(0)[..2], cat.codes(1)[..2]);
        assert_eq!(cat.codes(0)[2], 0);
        assert_eq!(cat.codes(1)[2], 1);
        assert_eq!(cat.vocab_sizes()[2], 2);
    }

    #[test]
    fn distinct_codes_keep_depth() {
        let emb = EmbeddingMatrix::from_rows(&[vec![0.0], vec![1.0], vec![10.0], vec![11.0]]).unwrap();
        let cb = fit_codebooks(&emb, 2, 2, 0, 20).unwrap();
        let cat = tokenize(&emb, &cb).unwrap();
        assert_eq!(cat.depth(), 2);
        assert!(!cat.dedup_level_present());
    }

    #[test]
    fn codes_match_exhaustive_nearest_search() {
        let emb = random_points(8, 3, 21);
        let cb = fit_codebooks(&emb, 2, 2, 4, 30).unwrap();
        let cat = tokenize(&emb, &cb).unwrap();
        for i in 0..8 {
            let mut r = emb.row(i).to_vec();
            for level in 0..2 {
                // brute force: evaluate every centroid, keep the first strict minimum
                let dists: Vec<f64> = (0..2).map(|k| sq_dist(&r, cb.centroid(level, k))).collect();
                let best = if dists[1] < dists[0] { 1 } else { 0 };
                assert_eq!(cat.codes(i)[level], best as u32);
                for (x, m) in r.iter_mut().zip(cb.centroid(level, best)) {
                    *x -= m;
                }
            }
        }
    }

    #[test]
    fn second_level_does_not_increase_total_residual() {
        let emb = random_points(16, 2, 99);
        let cb = fit_codebooks(&emb, 2, 2, 7, 50).unwrap();
        // reference quantizer: exhaustive assignment over all centroid pairs per level
        let mut totals = [0.0f64; 2];
        for i in 0..16 {
            let mut r = emb.row(i).to_vec();
            for (level, total) in totals.iter_mut().enumerate() {
                let k = (0..2)
                    .min_by(|&a, &b| {
                        sq_dist(&r, cb.centroid(level, a))
                            .partial_cmp(&sq_dist(&r, cb.centroid(level, b)))
                            .unwrap()
                    })
                    .unwrap();
                for (x, m) in r.iter_mut().zip(cb.centroid(level, k)) {
                    *x -= m;
                }
                *total += r.iter().map(|x| x * x).sum::<f64>();
            }
        }
        assert!(totals[1] <= totals[0] + 1e-12, "{totals:?}");
    }

    #[test]
    fn equidistant_resolves_to_lowest_index() {
        let cb = Codebooks {
            dim: 1,
            codebook_size: 3,
            seed: 0,
            centroids: vec![vec![-1.0, 1.0, 1.0]],
        };
        assert_eq!(cb.nearest(0, &[0.0]), 0);
        assert_eq!(cb.nearest(0, &[1.0]), 1);
    }

    #[test]
    fn errors() {
        let emb = random_points(3, 2, 1);
        assert!(matches!(fit_codebooks(&emb, 1, 4, 0, 5), Err(Error::Config(_))));
        assert!(matches!(fit_codebooks(&emb, 0, 2, 0, 5), Err(Error::Config(_))));
        assert!(matches!(
            EmbeddingMatrix::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::Data(_))
        ));
        let cb = fit_codebooks(&emb, 1, 2, 0, 5).unwrap();
        let wrong = random_points(3, 3, 1);
        assert!(matches!(tokenize(&wrong, &cb), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_for_seed() {
        let emb = random_points(40, 4, 8);
        let a = tokenize(&emb, &fit_codebooks(&emb, 3, 4, 17, 25).unwrap()).unwrap();
        let b = tokenize(&emb, &fit_codebooks(&emb, 3, 4, 17, 25).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let emb = random_points(10, 3, 2);
        let table = dir.path().join("emb.tsv");
        emb.save_table(&table).unwrap();
        assert_eq!(EmbeddingMatrix::load_table(&table).unwrap(), emb);

        let raw = dir.path().join("emb.f32");
        emb.save_raw_f32(&raw).unwrap();
        let back = EmbeddingMatrix::load_raw_f32(&raw).unwrap();
        for (a, b) in back.as_slice().iter().zip(emb.as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }

        let cat = tokenize(&emb, &fit_codebooks(&emb, 2, 3, 0, 10).unwrap()).unwrap();
        let path = dir.path().join("catalog.tsv");
        cat.write_tsv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().starts_with("0\t"));
        let back = TokenizedCatalog::read_tsv(&path, Some(cat.vocab_sizes().to_vec())).unwrap();
        assert_eq!(back.codes, cat.codes);
    }
}
