//! Acceptance gate. Each criterion prints one PASS/FAIL line; any failure
//! makes the target fail.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dupaudit::backend::{
    mock_unit_vector, Backend, BackendTokenizer, DetectionPlan, MockBackend, MockPlan,
    PositiveGenerations, ReplicationPlan, MOCK_DIM, MOCK_MODEL_TAG,
};
use dupaudit::cluster::{cluster_embeddings, word_counts, Cluster, ClusterSource, Clustering, Stopwords};
use dupaudit::embed::{EmbeddingMatrix, EmbeddingVector, Modality};
use dupaudit::ingest::{
    filter_by_keywords, token_length_filter, CaptionRecord, DatasetSlice, FilterSpec, MatchMode,
    WhitespaceTokenizer,
};
use dupaudit::pipeline::{run_pipeline_with, PipelineConfig};
use dupaudit::probe::{
    baseline_object_rate, is_extractable, object_presence_rate, percent_above, run_probe,
    text_similarity, MemorizationCriterion, Metric, ProbeMode, ProbeOptions, ProbeResult,
    ProbeSpec, ReferenceSet,
};
use dupaudit::report::{emit_cluster_table, emit_probe_table, parse_distribution, ReportFormat};

use common::{check_golden, planted_pipeline, snapshot, PLANTED_SIZES};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn unit_f32(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Unit vector at cosine `s` from unit `p`, leaning towards `q`.
fn at_similarity(p: &[f32], q: &[f32], s: f64) -> Vec<f32> {
    let p = f64s(p);
    let mut q = f64s(q);
    let along: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
    for (qi, pi) in q.iter_mut().zip(&p) {
        *qi -= along * pi;
    }
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let t = (1.0 - s * s).sqrt();
    unit_f32(&p.iter().zip(&q).map(|(a, b)| s * a + t * b / qn).collect::<Vec<_>>())
}

fn matrix(vectors: Vec<Vec<f32>>, modality: Modality) -> EmbeddingMatrix {
    let n = vectors.len() as u64;
    EmbeddingMatrix::new(
        (0..n).collect(),
        vectors.into_iter().map(|v| EmbeddingVector::from_unit(v).unwrap()).collect(),
        MOCK_DIM,
        modality,
        MOCK_MODEL_TAG,
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Clustering oracle

/// Straightforward greedy leader clustering: each vector, in order, joins the
/// leader it is most similar to when that similarity reaches tau (earliest
/// leader on ties) and otherwise leads a new cluster. Clusters are listed by
/// size, larger first, then by smallest member.
fn oracle_clusters(ids: &[u64], vs: &[Vec<f32>], tau: f64) -> Vec<(u64, Vec<u64>)> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in 0..vs.len() {
        let mut choice: Option<usize> = None;
        let mut best = f64::NEG_INFINITY;
        for (g, (leader, _)) in groups.iter().enumerate() {
            let s: f64 = vs[i]
                .iter()
                .zip(&vs[*leader])
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            let s = s.clamp(-1.0, 1.0);
            if s >= tau && s > best {
                best = s;
                choice = Some(g);
            }
        }
        match choice {
            Some(g) => groups[g].1.push(i),
            None => groups.push((i, vec![i])),
        }
    }
    let mut out: Vec<(u64, Vec<u64>)> = groups
        .into_iter()
        .map(|(l, m)| {
            let mut members: Vec<u64> = m.into_iter().map(|r| ids[r]).collect();
            members.sort_unstable();
            (ids[l], members)
        })
        .collect();
    out.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.1[0].cmp(&b.1[0])));
    out
}

fn clustering_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut merged, mut split) = (0, 0);
    for trial in 0..20u64 {
        let tau = if trial % 2 == 0 { 0.7 } else { 0.9 };
        let n = rng.random_range(20..=200usize);
        let n_centres = rng.random_range(1..=12usize);
        let centres: Vec<Vec<f32>> = (0..n_centres)
            .map(|c| mock_unit_vector("image", format!("centre-{trial}-{c}").as_bytes()))
            .collect();
        let vs: Vec<Vec<f32>> = (0..n)
            .map(|i| {
                let c = &centres[rng.random_range(0..n_centres)];
                let s: f64 = rng.random_range(0.55..1.0);
                let q = mock_unit_vector("image", format!("noise-{trial}-{i}").as_bytes());
                at_similarity(c, &q, s)
            })
            .collect();
        // Sparse, shuffled ids.
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + rng.random_range(0..3)).collect();
        ids.sort_unstable();
        let m = EmbeddingMatrix::new(
            ids.clone(),
            vs.iter().map(|v| EmbeddingVector::from_unit(v.clone()).unwrap()).collect(),
            MOCK_DIM,
            Modality::Image,
            MOCK_MODEL_TAG,
        )
        .unwrap();
        let got: Vec<(u64, Vec<u64>)> = cluster_embeddings(&m, tau)
            .map_err(|e| e.to_string())?
            .clusters
            .iter()
            .map(|c| {
                let mut members = c.member_ids.clone();
                members.sort_unstable();
                (c.leader_id, members)
            })
            .collect();
        let want = oracle_clusters(&ids, &vs, tau);
        ensure!(got == want, "trial {trial} (n={n}, tau={tau}): clustering differs from oracle");
        merged += want.iter().filter(|(_, m)| m.len() > 1).count();
        split += want.iter().filter(|(_, m)| m.len() == 1).count();
    }
    ensure!(merged > 20 && split > 20, "fixtures too easy: {merged} merged, {split} singleton clusters");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Planted duplicates through the pipeline

fn planted_duplicate_recovery() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fx = planted_pipeline(dir.path(), "ingest, filter, embed, cluster, share");
    let cfg = PipelineConfig::load(&fx.config).map_err(|e| e.to_string())?;
    let backend = MockBackend::new(fx.plan.clone());
    run_pipeline_with(&cfg, &backend).map_err(|e| e.to_string())?;

    let c = Clustering::load(&fx.out_dir.join("clusters.json")).map_err(|e| e.to_string())?;
    let sizes: Vec<usize> = c.clusters.iter().map(Cluster::size).collect();
    ensure!(sizes == PLANTED_SIZES, "cluster sizes {sizes:?}, planted {PLANTED_SIZES:?}");

    let share: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fx.out_dir.join("share.json")).unwrap()).unwrap();
    let share = share["share"].as_f64().unwrap();
    ensure!(share == 0.52, "share {share}, expected 0.52");

    let rows = parse_distribution(&fs::read_to_string(fx.out_dir.join("distribution.csv")).unwrap())
        .map_err(|e| e.to_string())?;
    let flagged: Vec<usize> = rows.iter().filter(|r| r.matches_reference).map(|r| r.rank).collect();
    ensure!(flagged == vec![1], "flagged ranks {flagged:?}");
    ensure!(rows.len() == PLANTED_SIZES.len(), "{} distribution rows", rows.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// Keyword count conservation

fn keyword_count_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vocab: Vec<String> = (0..120).map(|i| format!("w{i}")).collect();
    let captions: Vec<String> = (0..500)
        .map(|_| {
            let len = rng.random_range(3..=12);
            (0..len)
                .map(|_| vocab[rng.random_range(0..vocab.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let slice = DatasetSlice::new(
        "words",
        captions
            .iter()
            .enumerate()
            .map(|(i, c)| CaptionRecord::new(i as u64, c.clone(), "https://e.org/i.jpg"))
            .collect(),
    )
    .unwrap();

    // Random partition into clusters.
    let mut ids: Vec<u64> = (0..500).collect();
    ids.shuffle(&mut rng);
    let mut parts: Vec<Vec<u64>> = Vec::new();
    let mut rest = &ids[..];
    while !rest.is_empty() {
        let take = rng.random_range(1..=rest.len().min(60));
        let mut p = rest[..take].to_vec();
        p.sort_unstable();
        parts.push(p);
        rest = &rest[take..];
    }

    let per_cluster: Vec<BTreeMap<String, u64>> = parts
        .iter()
        .map(|p| word_counts(p, &slice, &Stopwords::none()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for _ in 0..50 {
        let w = &vocab[rng.random_range(0..vocab.len())];
        let oracle = captions
            .iter()
            .flat_map(|c| c.split(' '))
            .filter(|t| t == w)
            .count() as u64;
        let summed: u64 = per_cluster.iter().map(|m| m.get(w).copied().unwrap_or(0)).sum();
        ensure!(summed == oracle, "word {w}: clusters sum to {summed}, slice has {oracle}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Probes

const STARRY: &str = "Van Gogh starry night";

fn pick_seeds(n: usize, k: usize, salt: u64) -> BTreeSet<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let mut all: Vec<u64> = (0..n as u64).collect();
    all.shuffle(&mut rng);
    all[..k].iter().copied().collect()
}

fn starry_reference() -> Vec<f32> {
    mock_unit_vector("image", b"training image: the starry night")
}

struct SimilarityRow {
    prompt: &'static str,
    keywords: &'static str,
    text_similarity: f64,
    hits: usize,
}

/// Text similarities and replication counts (of 500 seeds) for five prompts
/// sharing the cluster's key terms.
const SIMILARITY_PROBES: [SimilarityRow; 5] = [
    SimilarityRow { prompt: STARRY, keywords: "", text_similarity: 1.0, hits: 323 },
    SimilarityRow {
        prompt: "A landscape under a starry night sky painted with Van Gogh's swirling colours.",
        keywords: "starry night Van Gogh",
        text_similarity: 0.8279,
        hits: 284,
    },
    SimilarityRow {
        prompt: "Above a quiet harbour town the starry night churns in the manner of Van Gogh, while lamps glow along the empty quay.",
        keywords: "starry night Van Gogh",
        text_similarity: 0.7323,
        hits: 207,
    },
    SimilarityRow {
        prompt: "Clockwork owls with starry-patterned wings copy Van Gogh canvases by candlelight at night.",
        keywords: "starry Van Gogh night",
        text_similarity: 0.5690,
        hits: 93,
    },
    SimilarityRow {
        prompt: "Beneath the starry night, my garden gnome drafted plans for a moon base.",
        keywords: "starry night",
        text_similarity: 0.4621,
        hits: 178,
    },
];

fn similarity_backend_and_refs() -> (MockBackend, ReferenceSet) {
    let reference = starry_reference();
    let plan = MockPlan {
        replications: SIMILARITY_PROBES
            .iter()
            .enumerate()
            .map(|(i, row)| ReplicationPlan {
                prompt: row.prompt.into(),
                reference: reference.clone(),
                hit_similarity: 0.9,
                miss_similarity: Some(if i % 2 == 0 { 0.75 } else { 0.82 }),
                hit_seeds: Some(pick_seeds(500, row.hits, i as u64)),
            })
            .collect(),
        ..MockPlan::default()
    };
    let mut corpus: Vec<Vec<f32>> = SIMILARITY_PROBES
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let p = mock_unit_vector("text", row.prompt.as_bytes());
            if row.text_similarity == 1.0 {
                p
            } else {
                let q = mock_unit_vector("text", format!("caption {i}").as_bytes());
                at_similarity(&p, &q, row.text_similarity)
            }
        })
        .collect();
    corpus.extend((0..40).map(|i| mock_unit_vector("text", format!("filler caption {i}").as_bytes())));
    let refs = ReferenceSet::new(
        matrix(vec![reference], Modality::Image),
        matrix(corpus, Modality::Text),
    )
    .unwrap();
    (MockBackend::new(plan), refs)
}

fn similarity_results() -> Result<Vec<ProbeResult>, String> {
    let (backend, refs) = similarity_backend_and_refs();
    SIMILARITY_PROBES.iter()
        .map(|row| {
            let mut spec = ProbeSpec::new(row.prompt);
            spec.highlight_keywords = row.keywords.split_whitespace().map(String::from).collect();
            run_probe(&spec, &backend, &refs, 0.83, &ProbeOptions::default()).map_err(|e| e.to_string())
        })
        .collect()
}

/// Detector-positive counts (of 500 seeds) for four astronaut prompts.
const FLAG_PROBES: [(&str, usize); 4] = [
    ("A young astronaut rides a puppy between the planets", 120),
    ("Trainee astronauts practise inside a full-size capsule replica.", 235),
    ("An astronaut on a spacewalk tests tools for fixing a weather satellite.", 317),
    ("An astronaut in a bulky Orlan pressure suit floats outside the station.", 489),
];

const FLAG: &str = "US flag";

fn flag_results(dir: &Path) -> Result<Vec<ProbeResult>, String> {
    let reference = mock_unit_vector("image", b"training image: astronaut on the moon");
    let training = dir.join("training");
    fs::create_dir_all(&training).unwrap();
    let mut records = Vec::new();
    let mut flagged = BTreeSet::new();
    for i in 0..100u64 {
        let bytes = format!("astronaut training image {i}").into_bytes();
        if i % 10 == 3 {
            flagged.insert(hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&bytes)));
        }
        let path = training.join(format!("{i}.jpg"));
        fs::write(&path, bytes).unwrap();
        records.push(
            CaptionRecord::new(i, format!("astronaut photo {i}"), "https://e.org/a.jpg").with_image_ref(path),
        );
    }
    let slice = DatasetSlice::new("astronaut", records).unwrap();
    let plan = MockPlan {
        detections: vec![DetectionPlan {
            label: FLAG.into(),
            default_present: false,
            positive_generations: FLAG_PROBES
                .iter()
                .enumerate()
                .map(|(i, (prompt, k))| PositiveGenerations {
                    prompt: prompt.to_string(),
                    seeds: Some(pick_seeds(500, *k, 100 + i as u64)),
                })
                .collect(),
            positive_images: flagged,
        }],
        ..MockPlan::default()
    };
    let backend = MockBackend::new(plan);
    let refs = ReferenceSet::new(
        matrix(vec![reference], Modality::Image),
        EmbeddingMatrix::empty(MOCK_DIM, Modality::Text, MOCK_MODEL_TAG).unwrap(),
    )
    .unwrap();
    let baseline = baseline_object_rate(&slice, 100, &backend, FLAG, 11).map_err(|e| e.to_string())?;
    ensure!(baseline.percent == 10.0, "baseline {}%", baseline.percent);
    let opts = ProbeOptions {
        mode: ProbeMode::Images { dir: dir.join("generated") },
        ..ProbeOptions::default()
    };
    FLAG_PROBES.iter()
        .map(|(prompt, _)| {
            let mut spec = ProbeSpec::new(*prompt);
            spec.highlight_keywords = vec![if prompt.contains("astronauts") { "astronauts" } else { "astronaut" }.into()];
            let mut r = run_probe(&spec, &backend, &refs, 0.83, &opts).map_err(|e| e.to_string())?;
            r.object_presence = Some(object_presence_rate(&r, &backend, FLAG).map_err(|e| e.to_string())?);
            r.baseline = Some(baseline.clone());
            Ok(r)
        })
        .collect()
}

fn probe_conservation_and_monotonicity() -> Outcome {
    let start = Instant::now();
    let results = similarity_results()?;
    for r in &results {
        ensure!(r.buckets.total() == 500, "{}: buckets hold {}", r.spec.prompt, r.buckets.total());
        let sims = r.successful_sims();
        let pcts: Vec<f64> = [0.5, 0.7, 0.83, 0.9]
            .iter()
            .map(|&t| percent_above(&sims, t).unwrap())
            .collect();
        ensure!(pcts.windows(2).all(|w| w[0] >= w[1]), "{}: not monotone {pcts:?}", r.spec.prompt);
    }
    ensure!(results[0].percent_above == 64.6, "starry night: {}%", results[0].percent_above);

    let dir = tempfile::tempdir().unwrap();
    let flags = flag_results(dir.path())?;
    let rates: Vec<f64> = flags.iter().map(|r| r.object_presence.as_ref().unwrap().percent).collect();
    ensure!(rates == vec![24.0, 47.0, 63.4, 97.8], "flag rates {rates:?}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Text similarity

fn text_similarity_identity() -> Outcome {
    let (backend, refs) = similarity_backend_and_refs();
    let s = text_similarity(STARRY, &refs, &backend).map_err(|e| e.to_string())?;
    ensure!((s - 1.0).abs() <= 1e-4, "verbatim prompt scored {s}");

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for size in [1usize, 2, 17, 250, 1000] {
        let corpus: Vec<Vec<f32>> = (0..size)
            .map(|i| mock_unit_vector("text", format!("caption {size} {i} {}", rng.random::<u32>()).as_bytes()))
            .collect();
        let refs = ReferenceSet::new(
            matrix(vec![starry_reference()], Modality::Image),
            matrix(corpus.clone(), Modality::Text),
        )
        .unwrap();
        let prompt = format!("query {size}");
        let p = mock_unit_vector("text", prompt.as_bytes());
        let oracle = corpus
            .iter()
            .map(|c| p.iter().zip(c).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        let got = text_similarity(&prompt, &refs, &backend).map_err(|e| e.to_string())?;
        ensure!((got - oracle).abs() <= 1e-12, "corpus {size}: {got} vs oracle {oracle}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Extractability

fn extractability_monotonicity() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (1usize..=16)
        .prop_flat_map(|d| {
            (
                prop::collection::vec(-1.0f64..1.0, d),
                prop::collection::vec(-1.0f64..1.0, d),
                0.0f64..2.5,
                0.0f64..2.5,
                prop::bool::ANY,
            )
        })
        .prop_filter("non-zero vectors", |(a, b, ..)| {
            a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3)
        });
    runner
        .run(&strategy, |(a, b, d1, d2, cosine)| {
            let a = common::unit(&a);
            let b = common::unit(&b);
            let metric = if cosine { Metric::CosineDistance } else { Metric::L2 };
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let at_lo = is_extractable(&a, &b, &MemorizationCriterion::new(metric, lo).unwrap()).unwrap();
            let at_hi = is_extractable(&a, &b, &MemorizationCriterion::new(metric, hi).unwrap()).unwrap();
            prop_assert!(!at_lo || at_hi, "extractable at {} but not at {}", lo, hi);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Golden reports

struct KeywordRow(&'static [(&'static str, usize)]);

/// Planted word counts for the seven largest clusters.
const KEYWORD_CLUSTERS: [KeywordRow; 7] = [
    KeywordRow(&[("van", 3061), ("gogh", 3042), ("night", 2841), ("starry", 2806)]),
    KeywordRow(&[("van", 1950), ("gogh", 1937), ("vincent", 1374), ("self-portrait", 795), ("portrait", 674)]),
    KeywordRow(&[("van", 1839), ("gogh", 1833), ("almond", 1764), ("vincent", 1201), ("tree", 1129), ("blossoming", 1003)]),
    KeywordRow(&[("van", 1725), ("gogh", 1715), ("sunflowers", 1549), ("vincent", 1110), ("vase", 601)]),
    KeywordRow(&[("van", 1628), ("gogh", 1622), ("terrace", 1477), ("cafe", 1313), ("vincent", 1135), ("night", 1034), ("arles", 530)]),
    KeywordRow(&[("van", 1035), ("gogh", 1032), ("night", 955), ("starry", 925), ("rhone", 862), ("vincent", 597)]),
    KeywordRow(&[("van", 906), ("gogh", 899), ("irises", 807), ("vincent", 586)]),
];

fn keyword_fixture() -> (Clustering, DatasetSlice) {
    let mut records = Vec::new();
    let mut clusters = Vec::new();
    let mut next = 0u64;
    for (k, row) in KEYWORD_CLUSTERS.iter().enumerate() {
        let size = row.0.iter().map(|(_, n)| *n).max().unwrap();
        let start = next;
        for i in 0..size {
            // The stopword and the possessive must not be counted.
            let mut caption: Vec<String> = vec!["the".into()];
            for (w, n) in row.0 {
                if i < *n {
                    caption.push(if *w == "gogh" && i % 7 == 0 { "Gogh's".into() } else { w.to_string() });
                }
            }
            records.push(CaptionRecord::new(next, caption.join(" "), "https://e.org/p.jpg"));
            next += 1;
        }
        clusters.push(Cluster {
            cluster_id: k,
            leader_id: start,
            member_ids: (start..next).collect(),
            coherence: 0.95,
            keyword_freqs: Vec::new(),
        });
    }
    let c = Clustering {
        tau: 0.9,
        omitted_ids: Vec::new(),
        source: ClusterSource {
            backend_id: MOCK_MODEL_TAG.into(),
            modality: Modality::Image,
            slice: Some("van-gogh".into()),
        },
        clusters,
    };
    (c, DatasetSlice::new("van-gogh", records).unwrap())
}

fn golden_reports() -> Outcome {
    let (c, slice) = keyword_fixture();
    c.validate().map_err(|e| e.to_string())?;
    let table = emit_cluster_table(&c, &slice, &Stopwords::builtin(), 7, 7, ReportFormat::Text)
        .map_err(|e| e.to_string())?;
    ensure!(
        table.lines().nth(2) == Some("1 & van: 3061, gogh: 3042, night: 2841, starry: 2806"),
        "first row: {:?}",
        table.lines().nth(2)
    );
    check_golden("keyword_clusters.txt", &table)?;

    let similarity = similarity_results()?;
    let similarity_table = emit_probe_table(&similarity, ReportFormat::Text).map_err(|e| e.to_string())?;
    ensure!(
        similarity_table.lines().nth(1).is_some_and(|l| l.starts_with("Van Gogh starry night | 1.0000 | 64.6%")),
        "first probe row: {:?}",
        similarity_table.lines().nth(1)
    );
    check_golden("similarity_probes.txt", &similarity_table)?;
    check_golden("similarity_probes.csv", &emit_probe_table(&similarity, ReportFormat::Csv).unwrap())?;

    let dir = tempfile::tempdir().unwrap();
    let mut flags = flag_results(dir.path())?;
    // Persisted image paths live in a temporary directory; the table does not show them.
    for r in &mut flags {
        for s in &mut r.per_seed {
            s.image_ref = None;
        }
    }
    let t4 = emit_probe_table(&flags, ReportFormat::Text).map_err(|e| e.to_string())?;
    ensure!(t4.lines().nth(4).is_some_and(|l| l.contains("| 97.8% |")), "last row: {:?}", t4.lines().nth(4));
    check_golden("flag_probes.txt", &t4)?;
    check_golden("flag_probes.md", &emit_probe_table(&flags, ReportFormat::Markdown).unwrap())?;

    // Pipeline rerun is a no-op.
    let pdir = tempfile::tempdir().unwrap();
    let fx = planted_pipeline(pdir.path(), "ingest, filter, embed, cluster, keywords, share, report");
    let cfg = PipelineConfig::load(&fx.config).map_err(|e| e.to_string())?;
    run_pipeline_with(&cfg, &MockBackend::new(fx.plan.clone())).map_err(|e| e.to_string())?;
    let before = snapshot(&fx.out_dir);
    let second = MockBackend::new(fx.plan.clone());
    let rerun = run_pipeline_with(&cfg, &second).map_err(|e| e.to_string())?;
    ensure!(rerun.written.is_empty(), "rerun wrote {:?}", rerun.written);
    ensure!(rerun.ran.is_empty(), "rerun executed {:?}", rerun.ran);
    ensure!(second.request_count() == 0, "rerun made {} backend calls", second.request_count());
    ensure!(snapshot(&fx.out_dir) == before, "output bytes changed on rerun");
    Ok(())
}

// ---------------------------------------------------------------------------
// Filtering

fn filtering_pipeline() -> Outcome {
    let caption = |n: usize| (0..n).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
    let slice = DatasetSlice::new(
        "tokens",
        [76, 77, 78, 1, 200]
            .iter()
            .enumerate()
            .map(|(i, &n)| CaptionRecord::new(i as u64, caption(n), "https://e.org/x.jpg"))
            .collect(),
    )
    .unwrap();
    let backend = MockBackend::new(MockPlan::default());
    for tokenizer in [
        &BackendTokenizer::new(&backend) as &dyn dupaudit::ingest::Tokenizer,
        &WhitespaceTokenizer,
    ] {
        let out = token_length_filter(&slice, tokenizer, 77).map_err(|e| e.to_string())?;
        let kept = out.active_ids();
        ensure!(kept == vec![0, 1, 3], "{}: kept {kept:?}", tokenizer.name());
    }

    let captions = [
        "Van Gogh almond blossoming",          // 0
        "almond blossoming branches",          // 1
        "van gogh self-portrait",              // 2
        "Gogh, van: sunflowers",               // 3
        "vincent van gogh's blossoming almond", // 4
        "a vanity case",                       // 5
        "ALMOND milk",                         // 6
        "",                                    // 7
    ];
    let slice = DatasetSlice::new(
        "kw",
        captions
            .iter()
            .enumerate()
            .map(|(i, c)| CaptionRecord::new(i as u64, *c, "https://e.org/x.jpg"))
            .collect(),
    )
    .unwrap();
    let cases: [(&[&str], MatchMode, Vec<u64>); 6] = [
        (&["van gogh"], MatchMode::All, vec![0, 2, 4]),
        (&["van", "gogh"], MatchMode::All, vec![0, 2, 3, 4]),
        (&["almond", "blossoming"], MatchMode::All, vec![0, 1, 4]),
        (&["almond", "blossoming"], MatchMode::Any, vec![0, 1, 4, 6]),
        (&["sunflowers", "portrait"], MatchMode::Any, vec![2, 3]),
        (&["van"], MatchMode::Any, vec![0, 2, 3, 4]),
    ];
    for (keywords, mode, expected) in cases {
        let got = filter_by_keywords(&slice, &FilterSpec::words(keywords, mode)).active_ids();
        ensure!(got == expected, "{keywords:?} {mode:?}: kept {got:?}, expected {expected:?}");
    }
    Ok(())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("clustering matches an independent greedy oracle", clustering_oracle_equivalence),
        ("planted duplicate groups are recovered", planted_duplicate_recovery),
        ("per-cluster keyword counts sum to slice counts", keyword_count_conservation),
        ("probe buckets conserve seeds and rates are monotone", probe_conservation_and_monotonicity),
        ("verbatim prompt has text similarity 1 and matches the max oracle", text_similarity_identity),
        ("extractability is monotone in delta", extractability_monotonicity),
        ("reports match golden files and reruns change nothing", golden_reports),
        ("token and keyword filters match enumerated oracles", filtering_pipeline),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(()) => println!("PASS  {name} ({ms} ms)"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name} ({ms} ms): {e}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", 8 - failed, 8);
    if failed > 0 {
        std::process::exit(1);
    }
}
