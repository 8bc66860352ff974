#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dupaudit::backend::{mock_png, MockPlan, ReplicationPlan, MOCK_DIM, MOCK_MODEL_TAG};
use dupaudit::embed::{normalize, EmbeddingMatrix, EmbeddingVector, Modality};

pub fn basis(k: usize) -> Vec<f32> {
    let mut v = vec![0.0f32; MOCK_DIM];
    v[k] = 1.0;
    v
}

pub fn unit(xs: &[f64]) -> EmbeddingVector {
    normalize(xs).unwrap()
}

pub fn write_matrix(path: &Path, vectors: Vec<Vec<f32>>, modality: Modality) {
    let n = vectors.len() as u64;
    let m = EmbeddingMatrix::new(
        (0..n).collect(),
        vectors
            .into_iter()
            .map(|v| EmbeddingVector::from_unit(v).unwrap())
            .collect(),
        MOCK_DIM,
        modality,
        MOCK_MODEL_TAG,
    )
    .unwrap();
    m.save(path).unwrap();
}

/// Sizes of the five planted near-duplicate groups.
pub const PLANTED_SIZES: [usize; 5] = [52, 20, 12, 10, 6];

pub struct PlantedPipeline {
    pub config: PathBuf,
    pub out_dir: PathBuf,
    pub plan: MockPlan,
}

/// Training images for five groups whose members sit at cosine 0.97 from
/// orthogonal centres, plus rows the filter stage must drop.
pub fn planted_pipeline(dir: &Path, stages: &str) -> PlantedPipeline {
    let images = dir.join("images");
    fs::create_dir_all(&images).unwrap();
    let mut tsv = String::from("id\tcaption\turl\timage_path\n");
    let mut id = 0u64;
    let captions = [
        "the starry night by van gogh",
        "van gogh almond blossoming tree",
        "van gogh sunflowers in a vase",
        "cafe terrace at night van gogh",
        "van gogh irises",
    ];
    for (k, &size) in PLANTED_SIZES.iter().enumerate() {
        for j in 0..size {
            let name = format!("g{k}_{j}.png");
            fs::write(images.join(&name), mock_png(&format!("planted-{k}"), j as u64)).unwrap();
            tsv.push_str(&format!(
                "{id}\t{} print {j}\thttps://img.example.org/{k}/{j}.jpg\timages/{name}\n",
                captions[k]
            ));
            id += 1;
        }
    }
    // Dropped by the keyword filter, the URL check and the token limit.
    fs::write(images.join("x.png"), mock_png("stray", 0)).unwrap();
    tsv.push_str(&format!("{id}\ta photo of a cat\thttps://img.example.org/c.jpg\timages/x.png\n"));
    id += 1;
    tsv.push_str(&format!("{id}\tvan gogh copy\tnot a url\timages/x.png\n"));
    id += 1;
    let long = vec!["gogh"; 80].join(" ");
    tsv.push_str(&format!("{id}\tvan {long}\thttps://img.example.org/l.jpg\timages/x.png\n"));
    fs::write(dir.join("captions.tsv"), tsv).unwrap();

    let plan = MockPlan {
        replications: (0..PLANTED_SIZES.len())
            .map(|k| ReplicationPlan {
                prompt: format!("planted-{k}"),
                reference: basis(k),
                hit_similarity: 0.97,
                miss_similarity: None,
                hit_seeds: None,
            })
            .collect(),
        ..MockPlan::default()
    };
    fs::write(dir.join("plan.json"), serde_json::to_string_pretty(&plan).unwrap()).unwrap();
    write_matrix(&dir.join("reference.daem"), vec![basis(0)], Modality::Image);

    let config = dir.join("audit.conf");
    fs::write(
        &config,
        format!(
            "# planted duplicate audit\n\
             stages = {stages}\n\
             out_dir = out\n\
             metadata = captions.tsv\n\
             backend = mock\n\
             mock_plan = plan.json\n\
             keywords = van gogh\n\
             modality = image\n\
             tau = 0.9\n\
             reference = reference.daem\n\
             tau_ref = 0.9\n\
             top_k_words = 4\n"
        ),
    )
    .unwrap();
    PlantedPipeline {
        config,
        out_dir: dir.join("out"),
        plan,
    }
}

/// Contents of every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compare `actual` with a stored golden file. `UPDATE_GOLDEN=1` rewrites it.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected != actual {
        return Err(format!(
            "{name} differs from golden file\n--- expected\n{expected}--- actual\n{actual}"
        ));
    }
    Ok(())
}
