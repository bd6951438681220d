//! Stochastic-block-model benchmark generator.
//!
//! Each graph is an SBM sample with dense intra-block and sparse inter-block
//! edges, resampled until connected. Node classes are k-means clusters of one
//! eigenvector of the unnormalized Laplacian (index drawn per graph from a
//! configured set), node features are the one-hot class vectors, and half the
//! nodes have their features zeroed; those masked nodes are the supervised
//! targets of the node-classification task.

use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FetaError, Result};
use crate::graph::{build_laplacian, eigendecompose, Graph, Labels, LaplacianKind};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: &str = "feta-ds/1";
pub const KMEANS_ITERATIONS: usize = 50;
pub const CONNECTIVITY_ATTEMPTS: usize = 20;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SBMConfig {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Eigenvector indices (ascending-eigenvalue order, 0 = constant) the
    /// signal may be drawn from; one is sampled uniformly per graph.
    pub eig_indices: Vec<usize>,
    /// (train, valid, test) graph counts.
    pub splits: (usize, usize, usize),
    pub seed: u64,
}

impl SBMConfig {
    pub fn n(&self) -> usize {
        self.blocks * self.nodes_per_block
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.nodes_per_block == 0 {
            return Err(FetaError::Config("block count and size must be positive".into()));
        }
        for (label, p) in [("p_intra", self.p_intra), ("p_inter", self.p_inter)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FetaError::Config(format!("{label} = {p} outside [0, 1]")));
            }
        }
        if self.p_inter > self.p_intra {
            return Err(FetaError::Config(format!(
                "inter-block probability {} exceeds intra-block probability {}",
                self.p_inter, self.p_intra
            )));
        }
        if self.eig_indices.is_empty() {
            return Err(FetaError::Config("empty eigenvector index set".into()));
        }
        let n = self.n();
        for &e in &self.eig_indices {
            if e == 0 || e >= n {
                return Err(FetaError::Config(format!(
                    "eigenvector index {e} outside the usable range 1..={} (0 is the constant vector)",
                    n - 1
                )));
            }
        }
        Ok(())
    }
}

/// One generated graph with its signal metadata. `graph` carries the one-hot
/// features (zeroed where masked), per-node class labels, and the mask.
#[derive(Debug, Clone)]
pub struct SyntheticGraph {
    pub id: usize,
    pub graph: Graph,
    pub chosen_eig: usize,
    pub class_of: Vec<usize>,
    /// true = features hidden; these nodes are the prediction targets.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub preset: String,
    pub seed: u64,
    pub classes: usize,
    pub train: Vec<SyntheticGraph>,
    pub valid: Vec<SyntheticGraph>,
    pub test: Vec<SyntheticGraph>,
}

impl DatasetSplit {
    pub fn all(&self) -> impl Iterator<Item = &SyntheticGraph> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// generation

/// Per-graph rng stream derived from (seed, graph index) with a splitmix64
/// finalizer, so generation order and scheduling never affect a graph's draw.
pub fn derive_stream(seed: u64, index: u64) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ index))
}

/// Samples one SBM graph: nodes v and w share a block iff
/// v / nodes_per_block == w / nodes_per_block; each pair gets an independent
/// unit-weight edge with the block-dependent probability. Disconnected draws
/// are rejected and resampled up to [`CONNECTIVITY_ATTEMPTS`] times.
pub fn generate_sbm(cfg: &SBMConfig, rng: &mut impl Rng) -> Result<Graph> {
    cfg.validate()?;
    let n = cfg.n();
    for _ in 0..CONNECTIVITY_ATTEMPTS {
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let p = if i / cfg.nodes_per_block == j / cfg.nodes_per_block {
                    cfg.p_intra
                } else {
                    cfg.p_inter
                };
                if rng.gen::<f64>() < p {
                    pairs.push((i, j));
                }
            }
        }
        let g = Graph::from_pairs(n, &pairs)?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(FetaError::Generation(format!(
        "no connected graph in {CONNECTIVITY_ATTEMPTS} draws (blocks={}, nodes_per_block={}, p_intra={}, p_inter={})",
        cfg.blocks, cfg.nodes_per_block, cfg.p_intra, cfg.p_inter
    )))
}

/// 1-D k-means with k-means++ seeding, a fixed iteration budget, and
/// empty-cluster reseeding from the point farthest from its centroid.
/// Returned labels are renumbered by ascending centroid value so cluster ids
/// do not depend on seeding order.
pub fn kmeans_1d(values: &[f64], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(FetaError::Domain(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }

    // k-means++: next centroid sampled proportional to squared distance from
    // the chosen set; fully covered inputs fall back to a uniform pick.
    let mut centroids: Vec<f64> = vec![values[rng.gen_range(0..n)]];
    while centroids.len() < k {
        let d2: Vec<f64> = values
            .iter()
            .map(|&v| {
                centroids
                    .iter()
                    .map(|&c| (v - c) * (v - c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    chosen = i;
                    break;
                }
                t -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(values[pick]);
    }

    let mut assign = vec![0usize; n];
    let assign_pass = |centroids: &[f64], assign: &mut Vec<usize>| {
        for (i, &v) in values.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, &cv) in centroids.iter().enumerate() {
                let d = (v - cv).abs();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
    };

    for _ in 0..KMEANS_ITERATIONS {
        assign_pass(&centroids, &mut assign);
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for (i, &v) in values.iter().enumerate() {
            sum[assign[i]] += v;
            count[assign[i]] += 1;
        }
        // Distance of each point to its assigned centroid, for reseeding.
        let mut dist: Vec<f64> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - centroids[assign[i]]).abs())
            .collect();
        for c in 0..k {
            if count[c] > 0 {
                centroids[c] = sum[c] / count[c] as f64;
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap())
                    .unwrap();
                centroids[c] = values[far];
                dist[far] = -1.0;
            }
        }
    }
    assign_pass(&centroids, &mut assign);

    // Renumber by ascending centroid (stable on exact ties).
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].partial_cmp(&centroids[b]).unwrap().then(a.cmp(&b)));
    let mut rank = vec![0usize; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    Ok(assign.iter().map(|&c| rank[c]).collect())
}

/// Builds the node-classification instance on `g`: classes are the k-means
/// clustering of one eigenvector of the normalized Laplacian (the operator the
/// model also filters with, so "frequency" means the same thing in the data
/// and in the filter), features are one-hot class vectors, and exactly ⌈n/2⌉
/// uniformly chosen nodes have their features zeroed while keeping their
/// labels.
pub fn assign_spectral_signals(
    g: &Graph,
    eig_index: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<SyntheticGraph> {
    let n = g.n;
    if classes < 2 {
        return Err(FetaError::Domain(format!("need at least 2 classes, got {classes}")));
    }
    if eig_index == 0 {
        return Err(FetaError::Domain(
            "eigenvector 0 is constant on a connected graph; clustering it is degenerate".into(),
        ));
    }
    if eig_index >= n {
        return Err(FetaError::Domain(format!(
            "eigenvector index {eig_index} out of range for {n} nodes"
        )));
    }

    let lap = build_laplacian(g, LaplacianKind::Normalized)?;
    let basis = eigendecompose(&lap)?;
    let v = basis.eigvec(eig_index);
    let class_of = kmeans_1d(&v, classes, rng)?;

    let mut x = Tensor::zeros(&[n, classes]);
    for (i, &c) in class_of.iter().enumerate() {
        x.set(i, c, 1.0);
    }

    // Exactly ⌈n/2⌉ masked nodes via a partial Fisher-Yates shuffle.
    let hidden = n.div_ceil(2);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..hidden {
        let j = i + rng.gen_range(0..n - i);
        order.swap(i, j);
    }
    let mut mask = vec![false; n];
    for &i in &order[..hidden] {
        mask[i] = true;
        for c in 0..classes {
            x.set(i, c, 0.0);
        }
    }

    let mut graph = g.clone();
    graph.x = Some(x);
    graph.labels = Some(Labels::NodeClasses(class_of.clone()));
    graph.mask = Some(mask.clone());
    Ok(SyntheticGraph { id: 0, graph, chosen_eig: eig_index, class_of, mask })
}

fn build_graph(cfg: &SBMConfig, global_index: usize) -> Result<SyntheticGraph> {
    let mut rng = derive_stream(cfg.seed, global_index as u64);
    let eig = cfg.eig_indices[rng.gen_range(0..cfg.eig_indices.len())];
    let g = generate_sbm(cfg, &mut rng)?;
    let mut sg = assign_spectral_signals(&g, eig, cfg.blocks, &mut rng)?;
    sg.id = global_index;
    Ok(sg)
}

pub fn build_from_config(preset: &str, cfg: &SBMConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let (tr, va, te) = cfg.splits;
    let mut graphs = Vec::with_capacity(tr + va + te);
    for idx in 0..tr + va + te {
        graphs.push(build_graph(cfg, idx)?);
    }
    let test = graphs.split_off(tr + va);
    let valid = graphs.split_off(tr);
    Ok(DatasetSplit {
        preset: preset.to_string(),
        seed: cfg.seed,
        classes: cfg.blocks,
        train: graphs,
        valid,
        test,
    })
}

/// Named dataset presets. Each graph draws its signal eigenvector uniformly
/// from a small index set: the Fiedler end and the top of the spectrum (plus
/// the midpoint for Synthetic_3), so a graph's classes live in either a
/// low-frequency or a high-frequency band and per-graph filter selection is
/// what the task rewards. Index 0 (the constant vector) is never eligible, so
/// the top of an n-node spectrum is index n - 1.
pub fn preset_config(name: &str, seed: u64) -> Result<SBMConfig> {
    let (blocks, eig_indices): (usize, Vec<usize>) = if name.eq_ignore_ascii_case("synthetic_1") {
        (2, vec![1, 19])
    } else if name.eq_ignore_ascii_case("synthetic_2") {
        (6, vec![1, 59])
    } else if name.eq_ignore_ascii_case("synthetic_3") {
        (6, vec![1, 30, 59])
    } else {
        return Err(FetaError::Config(format!(
            "unknown dataset preset {name:?} (expected Synthetic_1, Synthetic_2 or Synthetic_3)"
        )));
    };
    Ok(SBMConfig {
        blocks,
        nodes_per_block: 10,
        p_intra: 0.9,
        p_inter: 0.05,
        eig_indices,
        splits: (1000, 100, 100),
        seed,
    })
}

pub fn canonical_preset_name(name: &str) -> Result<&'static str> {
    for canonical in ["Synthetic_1", "Synthetic_2", "Synthetic_3"] {
        if name.eq_ignore_ascii_case(canonical) {
            return Ok(canonical);
        }
    }
    Err(FetaError::Config(format!(
        "unknown dataset preset {name:?} (expected Synthetic_1, Synthetic_2 or Synthetic_3)"
    )))
}

pub fn build_synthetic_dataset(name: &str, seed: u64) -> Result<DatasetSplit> {
    let canonical = canonical_preset_name(name)?;
    build_from_config(canonical, &preset_config(canonical, seed)?)
}

// ---------------------------------------------------------------------------
// persistence (feta-ds/1)

#[derive(Debug, Serialize, Deserialize)]
struct GraphRecord {
    id: usize,
    n: usize,
    edges: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    mask: Vec<bool>,
    chosen_eig: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    preset: String,
    seed: u64,
    classes: usize,
    counts: ManifestCounts,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestCounts {
    train: usize,
    valid: usize,
    test: usize,
}

fn record_of(sg: &SyntheticGraph, classes: usize) -> Result<GraphRecord> {
    let n = sg.graph.n;
    let x = sg.graph.x.as_ref().ok_or_else(|| {
        FetaError::Contract("synthetic graph without features cannot be serialized".into())
    })?;
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        features.push((0..classes).map(|c| x.at(i, c)).collect());
    }
    Ok(GraphRecord {
        id: sg.id,
        n,
        edges: sg.graph.edges.iter().map(|&(i, j, _)| (i, j)).collect(),
        features,
        labels: sg.class_of.clone(),
        mask: sg.mask.clone(),
        chosen_eig: sg.chosen_eig,
    })
}

fn graph_of(rec: GraphRecord, classes: usize) -> Result<SyntheticGraph> {
    let n = rec.n;
    if rec.labels.len() != n || rec.mask.len() != n || rec.features.len() != n {
        return Err(FetaError::Config(format!(
            "dataset record {}: field lengths disagree with n = {n}",
            rec.id
        )));
    }
    let mut graph = Graph::from_pairs(n, &rec.edges)?;
    let mut x = Tensor::zeros(&[n, classes]);
    for (i, row) in rec.features.iter().enumerate() {
        if row.len() != classes {
            return Err(FetaError::Config(format!(
                "dataset record {}: feature row has {} entries, expected {classes}",
                rec.id,
                row.len()
            )));
        }
        for (c, &v) in row.iter().enumerate() {
            x.set(i, c, v);
        }
    }
    graph.x = Some(x);
    graph.labels = Some(Labels::NodeClasses(rec.labels.clone()));
    graph.mask = Some(rec.mask.clone());
    Ok(SyntheticGraph {
        id: rec.id,
        graph,
        chosen_eig: rec.chosen_eig,
        class_of: rec.labels,
        mask: rec.mask,
    })
}

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` (one record per line)
/// and `manifest.json` into `dir`.
pub fn save_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, graphs) in [
        ("train", &split.train),
        ("valid", &split.valid),
        ("test", &split.test),
    ] {
        let mut file = std::fs::File::create(dir.join(format!("{name}.jsonl")))?;
        for sg in graphs {
            let rec = record_of(sg, split.classes)?;
            let line = serde_json::to_string(&rec)
                .map_err(|e| FetaError::Config(format!("serialize record {}: {e}", sg.id)))?;
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
        }
    }
    let manifest = Manifest {
        version: DATASET_FORMAT_VERSION.to_string(),
        preset: split.preset.clone(),
        seed: split.seed,
        classes: split.classes,
        counts: ManifestCounts {
            train: split.train.len(),
            valid: split.valid.len(),
            test: split.test.len(),
        },
    };
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FetaError::Config(format!("serialize manifest: {e}")))?;
    std::fs::write(dir.join("manifest.json"), body + "\n")?;
    Ok(())
}

fn load_jsonl(path: &Path, classes: usize) -> Result<Vec<SyntheticGraph>> {
    let file = std::fs::File::open(path)?;
    let mut graphs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| {
            FetaError::Config(format!("{}:{}: bad dataset record: {e}", path.display(), lineno + 1))
        })?;
        graphs.push(graph_of(rec, classes)?);
    }
    Ok(graphs)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let manifest_path = dir.join("manifest.json");
    let body = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&body)
        .map_err(|e| FetaError::Config(format!("{}: bad manifest: {e}", manifest_path.display())))?;
    if manifest.version != DATASET_FORMAT_VERSION {
        return Err(FetaError::Config(format!(
            "dataset format {:?} not supported (expected {:?})",
            manifest.version, DATASET_FORMAT_VERSION
        )));
    }
    let split = DatasetSplit {
        preset: manifest.preset,
        seed: manifest.seed,
        classes: manifest.classes,
        train: load_jsonl(&dir.join("train.jsonl"), manifest.classes)?,
        valid: load_jsonl(&dir.join("valid.jsonl"), manifest.classes)?,
        test: load_jsonl(&dir.join("test.jsonl"), manifest.classes)?,
    };
    let counts = (split.train.len(), split.valid.len(), split.test.len());
    if counts != (manifest.counts.train, manifest.counts.valid, manifest.counts.test) {
        return Err(FetaError::Config(format!(
            "dataset counts {counts:?} disagree with manifest ({}, {}, {})",
            manifest.counts.train, manifest.counts.valid, manifest.counts.test
        )));
    }
    Ok(split)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SBMConfig {
        SBMConfig {
            blocks: 2,
            nodes_per_block: 5,
            p_intra: 0.9,
            p_inter: 0.1,
            eig_indices: vec![1, 2],
            splits: (6, 2, 2),
            seed: 11,
        }
    }

    fn s1_config(seed: u64) -> SBMConfig {
        preset_config("Synthetic_1", seed).unwrap()
    }

    #[test]
    fn full_intra_probability_gives_complete_blocks() {
        let cfg = SBMConfig {
            blocks: 1,
            nodes_per_block: 6,
            p_intra: 1.0,
            p_inter: 0.0,
            eig_indices: vec![1],
            splits: (1, 0, 0),
            seed: 0,
        };
        let g = generate_sbm(&cfg, &mut derive_stream(0, 0)).unwrap();
        assert_eq!(g.n, 6);
        assert_eq!(g.edges.len(), 15);
    }

    #[test]
    fn full_probabilities_give_complete_graph() {
        let cfg = SBMConfig {
            blocks: 2,
            nodes_per_block: 3,
            p_intra: 1.0,
            p_inter: 1.0,
            eig_indices: vec![1],
            splits: (1, 0, 0),
            seed: 0,
        };
        let g = generate_sbm(&cfg, &mut derive_stream(0, 0)).unwrap();
        assert_eq!(g.edges.len(), 6 * 5 / 2);
    }

    #[test]
    fn impossible_connectivity_reports_generation_error() {
        let cfg = SBMConfig {
            blocks: 2,
            nodes_per_block: 3,
            p_intra: 0.0,
            p_inter: 0.0,
            eig_indices: vec![1],
            splits: (1, 0, 0),
            seed: 0,
        };
        match generate_sbm(&cfg, &mut derive_stream(0, 0)) {
            Err(FetaError::Generation(_)) => {}
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn config_rejects_inverted_probabilities_and_bad_indices() {
        let mut cfg = tiny_config();
        cfg.p_inter = 0.95;
        assert!(matches!(cfg.validate(), Err(FetaError::Config(_))));

        let mut cfg = tiny_config();
        cfg.p_intra = 1.5;
        assert!(matches!(cfg.validate(), Err(FetaError::Config(_))));

        let mut cfg = tiny_config();
        cfg.eig_indices = vec![0];
        assert!(matches!(cfg.validate(), Err(FetaError::Config(_))));

        let mut cfg = tiny_config();
        cfg.eig_indices = vec![10];
        assert!(matches!(cfg.validate(), Err(FetaError::Config(_))));
    }

    /// Empirical frequency oracle: over 200 draws the observed intra-block
    /// edge density must track the configured probability.
    #[test]
    fn intra_block_density_matches_probability() {
        let cfg = s1_config(3);
        let per_graph_intra_pairs = cfg.blocks * cfg.nodes_per_block * (cfg.nodes_per_block - 1) / 2;
        let mut intra_present = 0usize;
        let mut inter_present = 0usize;
        let n = cfg.n();
        let per_graph_inter_pairs = n * (n - 1) / 2 - per_graph_intra_pairs;
        let draws = 200;
        for idx in 0..draws {
            let g = generate_sbm(&cfg, &mut derive_stream(cfg.seed, idx)).unwrap();
            for &(i, j, _) in &g.edges {
                if i / cfg.nodes_per_block == j / cfg.nodes_per_block {
                    intra_present += 1;
                } else {
                    inter_present += 1;
                }
            }
        }
        let intra_density = intra_present as f64 / (draws as usize * per_graph_intra_pairs) as f64;
        let inter_density = inter_present as f64 / (draws as usize * per_graph_inter_pairs) as f64;
        assert!(
            (intra_density - 0.9).abs() <= 0.05,
            "intra density {intra_density} not within 0.9 ± 0.05"
        );
        assert!(
            (inter_density - 0.05).abs() <= 0.03,
            "inter density {inter_density} not within 0.05 ± 0.03"
        );
    }

    #[test]
    fn eigenvector_zero_is_rejected() {
        let g = Graph::complete(6);
        let err = assign_spectral_signals(&g, 0, 2, &mut derive_stream(1, 0));
        assert!(matches!(err, Err(FetaError::Domain(_))));
        let err = assign_spectral_signals(&g, 6, 2, &mut derive_stream(1, 0));
        assert!(matches!(err, Err(FetaError::Domain(_))));
    }

    /// On a 2-component graph the λ = 0 eigenspace is spanned by component
    /// indicators, so the second eigenvector separates the components and
    /// 2-means recovers them exactly.
    #[test]
    fn two_component_graph_classes_equal_components() {
        let g = Graph::from_pairs(
            6,
            &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)],
        )
        .unwrap();
        let sg = assign_spectral_signals(&g, 1, 2, &mut derive_stream(5, 0)).unwrap();
        let comp = [0, 0, 0, 1, 1, 1];
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(
                    sg.class_of[i] == sg.class_of[j],
                    comp[i] == comp[j],
                    "nodes {i},{j} clustered inconsistently with components: {:?}",
                    sg.class_of
                );
            }
        }
    }

    /// Block-recovery oracle: the planted partition is ground truth. With the
    /// Fiedler vector, k-means classes must agree with the blocks ≥ 90% on
    /// average over 100 graphs.
    #[test]
    fn fiedler_classes_recover_planted_blocks() {
        let cfg = s1_config(17);
        let n = cfg.n();
        let mut total_agreement = 0.0;
        let graphs = 100;
        for idx in 0..graphs {
            let mut rng = derive_stream(cfg.seed, idx);
            let g = generate_sbm(&cfg, &mut rng).unwrap();
            let sg = assign_spectral_signals(&g, 1, 2, &mut rng).unwrap();
            let matches = (0..n)
                .filter(|&v| sg.class_of[v] == v / cfg.nodes_per_block)
                .count();
            // 2 classes: agreement up to label swap.
            total_agreement += matches.max(n - matches) as f64 / n as f64;
        }
        let mean = total_agreement / graphs as f64;
        assert!(mean >= 0.9, "mean block recovery {mean} < 0.9");
    }

    /// Class balance invariant for low-index signals: each class holds at
    /// least 30% of nodes averaged over the graphs.
    #[test]
    fn low_index_classes_are_balanced() {
        let cfg = s1_config(29);
        let n = cfg.n();
        let mut class_fraction = [0.0f64; 2];
        let graphs = 100usize;
        for idx in 0..graphs {
            let mut rng = derive_stream(cfg.seed, idx as u64);
            let g = generate_sbm(&cfg, &mut rng).unwrap();
            let sg = assign_spectral_signals(&g, 1, 2, &mut rng).unwrap();
            for &c in &sg.class_of {
                class_fraction[c] += 1.0 / (n * graphs) as f64;
            }
        }
        for (c, &f) in class_fraction.iter().enumerate() {
            assert!(f >= 0.3, "class {c} average fraction {f} < 0.3");
        }
    }

    #[test]
    fn masking_zeroes_exactly_half_rounded_up() {
        for n in [5usize, 6, 20] {
            let g = Graph::path(n);
            let sg = assign_spectral_signals(&g, 1, 2, &mut derive_stream(n as u64, 0)).unwrap();
            let hidden = sg.mask.iter().filter(|&&m| m).count();
            assert_eq!(hidden, n.div_ceil(2));
            let x = sg.graph.x.as_ref().unwrap();
            for i in 0..n {
                let row_sum: f64 = (0..2).map(|c| x.at(i, c)).sum();
                if sg.mask[i] {
                    assert_eq!(row_sum, 0.0, "masked node {i} keeps features");
                } else {
                    assert_eq!(row_sum, 1.0, "visible node {i} not one-hot");
                    assert_eq!(x.at(i, sg.class_of[i]), 1.0);
                }
            }
            match sg.graph.labels {
                Some(Labels::NodeClasses(ref l)) => assert_eq!(l.len(), n),
                ref other => panic!("expected node labels, got {other:?}"),
            }
        }
    }

    #[test]
    fn kmeans_separates_two_obvious_groups() {
        let values = [0.01, 0.02, 0.0, 1.0, 1.01, 0.99];
        let labels = kmeans_1d(&values, 2, &mut derive_stream(2, 0)).unwrap();
        // Renumbering by centroid puts the low group in class 0.
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn kmeans_handles_more_clusters_than_distinct_values() {
        let values = [1.0, 1.0, 0.0, 0.0];
        let labels = kmeans_1d(&values, 3, &mut derive_stream(3, 0)).unwrap();
        assert_eq!(labels.len(), 4);
        assert_eq!(labels[2], labels[3]);
        assert_ne!(labels[0], labels[2]);
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        assert!(matches!(
            build_synthetic_dataset("Synthetic_9", 1),
            Err(FetaError::Config(_))
        ));
        assert!(matches!(
            preset_config("zinc", 1),
            Err(FetaError::Config(_))
        ));
    }

    #[test]
    fn preset_shapes_match_their_definitions() {
        let s1 = preset_config("Synthetic_1", 0).unwrap();
        assert_eq!((s1.blocks, s1.nodes_per_block), (2, 10));
        assert_eq!(s1.eig_indices, vec![1, 19]);
        let s2 = preset_config("Synthetic_2", 0).unwrap();
        assert_eq!((s2.blocks, s2.nodes_per_block), (6, 10));
        assert_eq!(s2.eig_indices, vec![1, 59]);
        let s3 = preset_config("Synthetic_3", 0).unwrap();
        assert_eq!(s3.eig_indices, vec![1, 30, 59]);
        assert_eq!(s3.eig_indices.len(), 3);
        assert_eq!(s1.splits, (1000, 100, 100));
    }

    #[test]
    fn small_build_has_expected_structure() {
        let cfg = tiny_config();
        let ds = build_from_config("tiny", &cfg).unwrap();
        assert_eq!(ds.train.len(), 6);
        assert_eq!(ds.valid.len(), 2);
        assert_eq!(ds.test.len(), 2);
        assert_eq!(ds.classes, 2);
        let mut seen_ids = Vec::new();
        for sg in ds.all() {
            assert_eq!(sg.graph.n, 10);
            assert!(sg.graph.is_connected());
            assert!(cfg.eig_indices.contains(&sg.chosen_eig));
            assert_eq!(sg.mask.iter().filter(|&&m| m).count(), 5);
            seen_ids.push(sg.id);
        }
        assert_eq!(seen_ids, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_builds_identical_bytes() {
        let cfg = tiny_config();
        let a = build_from_config("tiny", &cfg).unwrap();
        let b = build_from_config("tiny", &cfg).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        save_dataset(&a, dir_a.path()).unwrap();
        save_dataset(&b, dir_b.path()).unwrap();
        for file in ["train.jsonl", "valid.jsonl", "test.jsonl", "manifest.json"] {
            let bytes_a = std::fs::read(dir_a.path().join(file)).unwrap();
            let bytes_b = std::fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{file} differs between identical builds");
        }
    }

    #[test]
    fn different_seed_changes_the_data() {
        let mut cfg = tiny_config();
        let a = build_from_config("tiny", &cfg).unwrap();
        cfg.seed = 12;
        let b = build_from_config("tiny", &cfg).unwrap();
        let edges_a: Vec<_> = a.train.iter().map(|sg| sg.graph.edges.len()).collect();
        let edges_b: Vec<_> = b.train.iter().map(|sg| sg.graph.edges.len()).collect();
        let masks_a: Vec<_> = a.train.iter().map(|sg| sg.mask.clone()).collect();
        let masks_b: Vec<_> = b.train.iter().map(|sg| sg.mask.clone()).collect();
        assert!(edges_a != edges_b || masks_a != masks_b);
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let ds = build_from_config("tiny", &tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.preset, ds.preset);
        assert_eq!(loaded.seed, ds.seed);
        assert_eq!(loaded.classes, ds.classes);
        for (a, b) in ds.all().zip(loaded.all()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.chosen_eig, b.chosen_eig);
            assert_eq!(a.class_of, b.class_of);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.graph.edges, b.graph.edges);
            let (xa, xb) = (a.graph.x.as_ref().unwrap(), b.graph.x.as_ref().unwrap());
            assert_eq!(xa.data, xb.data);
        }
        // Re-saving the loaded dataset reproduces the files byte-for-byte.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        for file in ["train.jsonl", "valid.jsonl", "test.jsonl", "manifest.json"] {
            assert_eq!(
                std::fs::read(dir.path().join(file)).unwrap(),
                std::fs::read(dir2.path().join(file)).unwrap()
            );
        }
    }

    #[test]
    fn version_mismatch_is_rejected_on_load() {
        let ds = build_from_config("tiny", &tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let body = std::fs::read_to_string(&manifest_path)
            .unwrap()
            .replace(DATASET_FORMAT_VERSION, "feta-ds/9");
        std::fs::write(&manifest_path, body).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(FetaError::Config(_))));
    }
}
