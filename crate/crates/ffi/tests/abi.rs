use std::ffi::{c_char, CStr, CString};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::ptr;

use dupaudit::backend::{mock_unit_vector, MockBackend, MockPlan, ReplicationPlan, MOCK_DIM};
use dupaudit::embed::{normalize, EmbeddingMatrix, EmbeddingVector, Modality};
use dupaudit::probe::{run_probe, ProbeOptions, ProbeSpec, ReferenceSet};
use dupaudit_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn cpath(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_error() -> String {
    let p = da_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn axis(k: usize, wobble: f64) -> EmbeddingVector {
    let mut v = vec![0.0; MOCK_DIM];
    v[k] = 1.0;
    v[(k + 1) % MOCK_DIM] = wobble;
    normalize(&v).unwrap()
}

/// Three vectors near axis 0, two near axis 1 and one on axis 2.
fn write_matrix(path: &Path) {
    let vectors = vec![
        axis(0, 0.0),
        axis(0, 0.1),
        axis(1, 0.0),
        axis(0, 0.2),
        axis(2, 0.0),
        axis(1, 0.1),
    ];
    EmbeddingMatrix::new((0..6).collect(), vectors, MOCK_DIM, Modality::Image, "mock-v1")
        .unwrap()
        .save(path)
        .unwrap();
}

#[test]
fn slices_load_filter_and_save() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("m.tsv");
    fs::write(
        &tsv,
        "id\tcaption\turl\n0\tVan Gogh starry night\thttps://a.example/0\n\
         1\ta cat\thttps://a.example/1\n2\tgogh sunflowers\thttps://a.example/2\n",
    )
    .unwrap();
    let loaded = dupaudit::ingest::load_metadata(&tsv, dupaudit::ingest::MetadataFormat::Tsv).unwrap();
    let slice_path = dir.path().join("s.jsonl");
    loaded.slice.save(&slice_path).unwrap();

    unsafe {
        let mut slice = ptr::null_mut();
        assert_eq!(da_slice_load(cpath(&slice_path).as_ptr(), &mut slice), DaStatus::Ok);
        assert_eq!(da_slice_len(slice), 3);

        let mut all = ptr::null_mut();
        assert_eq!(da_slice_filter_keywords(slice, c("van gogh").as_ptr(), false, &mut all), DaStatus::Ok);
        assert_eq!(da_slice_active_count(all), 1);
        let mut any = ptr::null_mut();
        assert_eq!(da_slice_filter_keywords(slice, c("van gogh").as_ptr(), true, &mut any), DaStatus::Ok);
        assert_eq!(da_slice_active_count(any), 2);
        assert_eq!(da_slice_len(any), 2);

        let saved = dir.path().join("f.jsonl");
        assert_eq!(da_slice_save(any, cpath(&saved).as_ptr()), DaStatus::Ok);
        let back = dupaudit::ingest::DatasetSlice::load(&saved).unwrap();
        assert_eq!(back.active_ids(), vec![0, 2]);

        da_slice_free(all);
        da_slice_free(any);
        da_slice_free(slice);
    }
}

#[test]
fn clustering_and_share() {
    let dir = tempfile::tempdir().unwrap();
    let mpath = dir.path().join("e.daem");
    write_matrix(&mpath);
    let rpath = dir.path().join("r.daem");
    EmbeddingMatrix::new(vec![7], vec![axis(1, 0.0)], MOCK_DIM, Modality::Image, "mock-v1")
        .unwrap()
        .save(&rpath)
        .unwrap();

    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(da_matrix_load(cpath(&mpath).as_ptr(), &mut m), DaStatus::Ok);
        assert_eq!((da_matrix_len(m), da_matrix_dim(m)), (6, MOCK_DIM));

        let mut cl = ptr::null_mut();
        assert_eq!(da_cluster(m, 0.9, &mut cl), DaStatus::Ok);
        assert_eq!(da_clustering_count(cl), 3);
        let sizes: Vec<usize> = (0..3)
            .map(|r| {
                let mut s = 0;
                assert_eq!(da_clustering_size(cl, r, &mut s), DaStatus::Ok);
                s
            })
            .collect();
        assert_eq!(sizes, vec![3, 2, 1]);
        let mut s = 0;
        assert_eq!(da_clustering_size(cl, 3, &mut s), DaStatus::OutOfRange);
        assert!(last_error().contains("rank 3"));

        let cpath_ = dir.path().join("c.json");
        assert_eq!(da_clustering_save(cl, cpath(&cpath_).as_ptr()), DaStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(da_clustering_load(cpath(&cpath_).as_ptr(), &mut again), DaStatus::Ok);
        assert_eq!(da_clustering_count(again), 3);

        let mut r = ptr::null_mut();
        assert_eq!(da_matrix_load(cpath(&rpath).as_ptr(), &mut r), DaStatus::Ok);
        let mut share = f64::NAN;
        assert_eq!(da_cluster_share(again, m, r, 0, 0.9, &mut share), DaStatus::Ok);
        assert_eq!(share, 2.0 / 6.0);
        assert_eq!(da_cluster_share(again, m, r, 1, 0.9, &mut share), DaStatus::OutOfRange);

        assert_eq!(da_cluster(m, 1.5, &mut cl), DaStatus::Usage);
        assert!(!last_error().is_empty());

        da_clustering_free(again);
        da_clustering_free(cl);
        da_matrix_free(r);
        da_matrix_free(m);
    }
}

#[test]
fn probe_tables() {
    let dir = tempfile::tempdir().unwrap();
    let reference = mock_unit_vector("image", b"ref");
    let plan = MockPlan {
        replications: vec![ReplicationPlan {
            prompt: "a copied painting".into(),
            reference: reference.clone(),
            hit_similarity: 0.95,
            miss_similarity: Some(0.3),
            hit_seeds: Some((0..10).step_by(2).collect()),
        }],
        ..MockPlan::default()
    };
    let refs = ReferenceSet::new(
        EmbeddingMatrix::new(vec![0], vec![EmbeddingVector::from_unit(reference).unwrap()], MOCK_DIM, Modality::Image, "mock-v1").unwrap(),
        EmbeddingMatrix::empty(MOCK_DIM, Modality::Text, "mock-v1").unwrap(),
    )
    .unwrap();
    let mut spec = ProbeSpec::new("a copied painting");
    spec.n_seeds = 10;
    let result = run_probe(&spec, &MockBackend::new(plan), &refs, 0.8, &ProbeOptions::default()).unwrap();
    let path = dir.path().join("p.json");
    result.save(&path).unwrap();

    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(da_probe_load(cpath(&path).as_ptr(), &mut p), DaStatus::Ok);
        let mut pct = 0.0;
        assert_eq!(da_probe_percent_above(p, &mut pct), DaStatus::Ok);
        assert_eq!(pct, 50.0);

        let handles = [p as *const DaProbe];
        let mut table: *mut c_char = ptr::null_mut();
        assert_eq!(da_probe_table(handles.as_ptr(), 1, DaFormat::Csv, &mut table), DaStatus::Ok);
        let text = CStr::from_ptr(table).to_str().unwrap().to_string();
        da_string_free(table);
        let expected = dupaudit::report::emit_probe_table(&[result], dupaudit::report::ReportFormat::Csv).unwrap();
        assert_eq!(text, expected);

        assert_eq!(da_probe_table(ptr::null(), 1, DaFormat::Text, &mut table), DaStatus::NullPointer);
        da_probe_free(p);
    }
}

#[test]
fn pipeline_runs_then_skips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("m.tsv"),
        "id\tcaption\turl\n0\tstarry night\thttps://a.example/0\n1\tstarry sky\thttps://a.example/1\n",
    )
    .unwrap();
    fs::write(
        d.join("audit.conf"),
        "stages = ingest, filter, embed, cluster\nmetadata = m.tsv\nmodality = text\nkeywords = starry\n",
    )
    .unwrap();
    let conf = cpath(&d.join("audit.conf"));
    unsafe {
        let mut n = 0;
        assert_eq!(da_pipeline_run(conf.as_ptr(), &mut n), DaStatus::Ok);
        assert_eq!(n, 4);
        assert_eq!(da_pipeline_run(conf.as_ptr(), &mut n), DaStatus::Ok);
        assert_eq!(n, 0);
        assert_eq!(da_pipeline_run(conf.as_ptr(), ptr::null_mut()), DaStatus::Ok);
    }
    assert!(d.join("out/clusters.json").is_file());
}

#[test]
fn errors_are_reported_through_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(da_matrix_load(ptr::null(), &mut m), DaStatus::NullPointer);
        assert!(last_error().contains("path"));

        let missing = cpath(&dir.path().join("none.daem"));
        assert_eq!(da_matrix_load(missing.as_ptr(), &mut m), DaStatus::Usage);
        assert!(last_error().contains("none.daem"));
        assert!(m.is_null());

        let junk = dir.path().join("junk.daem");
        fs::write(&junk, b"garbage").unwrap();
        assert_eq!(da_matrix_load(cpath(&junk).as_ptr(), &mut m), DaStatus::Format);

        let bad = [0xffu8, 0xfe, 0];
        assert_eq!(da_matrix_load(bad.as_ptr().cast(), &mut m), DaStatus::InvalidUtf8);

        let mut share = 0.0;
        assert_eq!(
            da_cluster_share(ptr::null(), ptr::null(), ptr::null(), 0, 0.9, &mut share),
            DaStatus::NullPointer
        );

        let mut cl = ptr::null_mut();
        assert_eq!(da_cluster(ptr::null(), 0.9, &mut cl), DaStatus::NullPointer);
        assert_eq!(da_clustering_count(ptr::null()), 0);
        da_slice_free(ptr::null_mut());
        da_string_free(ptr::null_mut());
    }
    // A later success clears the message.
    let good = dir.path().join("e.daem");
    write_matrix(&good);
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(da_matrix_load(cpath(&good).as_ptr(), &mut m), DaStatus::Ok);
        da_matrix_free(m);
    }
    let v = unsafe { CStr::from_ptr(da_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert!(da_last_error().is_null());
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dupaudit.h");
    let header = fs::read_to_string(&header_path).unwrap();
    let src = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 20, "{exports:?}");
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }

    let dir = tempfile::tempdir().unwrap();
    let probe = dir.path().join("probe.c");
    fs::write(
        &probe,
        "#include \"dupaudit.h\"\n\
         int main(void) {\n\
           DaMatrix *m = NULL;\n\
           DaStatus s = da_matrix_load(\"x\", &m);\n\
           size_t n = da_matrix_len(m);\n\
           da_matrix_free(m);\n\
           return s == DA_STATUS_OK && n == 0 && da_last_error() != 0;\n\
         }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header_path.parent().unwrap())
        .arg(&probe)
        .status()
        .expect("a C compiler on PATH");
    assert!(status.success());
}
