//! End-to-end runs of the `sbam` binary.

use std::path::Path;
use std::process::{Command, Output};

fn sbam(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sbam"));
    cmd.args(args).env_remove("SBAM_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn sbam")
}

fn ok(args: &[&str]) -> Output {
    let out = sbam(args, &[]);
    assert!(
        out.status.success(),
        "sbam {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen_images(dir: &Path, count: usize, object_rows: usize, object_cols: usize, seed: u64) {
    gen_textured(dir, count, object_rows, object_cols, seed, 0.0);
}

fn gen_textured(
    dir: &Path,
    count: usize,
    object_rows: usize,
    object_cols: usize,
    seed: u64,
    texture: f32,
) {
    ok(&[
        "gen-synthetic",
        "--count",
        &count.to_string(),
        "--object-rows",
        &object_rows.to_string(),
        "--object-cols",
        &object_cols.to_string(),
        "--seed",
        &seed.to_string(),
        "--texture",
        &texture.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn salience_flat_image_gives_zero_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("flat.pgm");
    let mut bytes = b"P5\n16 16\n255\n".to_vec();
    bytes.extend(std::iter::repeat_n(100u8, 256));
    std::fs::write(&img, bytes).unwrap();

    let out = tmp.path().join("sal");
    ok(&[
        "salience",
        "--images",
        img.to_str().unwrap(),
        "--patch-side",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = read(&out.join("salience.csv"));
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",0"), "nonzero score in {line}");
    }
    let heat = std::fs::read(out.join("salience_0000.pgm")).unwrap();
    let raster = &heat[heat.len() - 4..];
    assert_eq!(raster, &[0u8; 4]);
}

#[test]
fn salience_heatmap_peaks_inside_the_object() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    gen_images(&imgs, 4, 2, 2, 5);
    let objects = read(&imgs.join("objects.csv"));

    let out = tmp.path().join("sal");
    ok(&[
        "salience",
        "--images",
        imgs.to_str().unwrap(),
        "--patch-side",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = read(&out.join("salience.csv"));
    // Every token scoring 1.0 must be an object token per the ground truth.
    let object_pairs: Vec<(usize, usize)> = objects
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            (
                it.next().unwrap().parse().unwrap(),
                it.next().unwrap().parse().unwrap(),
            )
        })
        .collect();
    let mut saw_peak = false;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let (sample, token): (usize, usize) =
            (fields[0].parse().unwrap(), fields[1].parse().unwrap());
        if fields[2] == "1" {
            saw_peak = true;
            assert!(
                object_pairs.contains(&(sample, token)),
                "peak at non-object token {line}"
            );
        }
    }
    assert!(saw_peak, "no token attained score 1");
}

#[test]
fn missing_input_file_fails_and_names_it() {
    let out = sbam(
        &[
            "salience",
            "--images",
            "/no/such/file.pgm",
            "--out",
            "/tmp/x",
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/file.pgm"));
}

#[test]
fn random_mask_at_three_quarters_masks_twelve_of_sixteen() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    gen_images(&imgs, 2, 2, 2, 1);
    let out = tmp.path().join("masks");
    ok(&[
        "mask",
        "--images",
        imgs.to_str().unwrap(),
        "--patch-side",
        "8",
        "--strategy",
        "random",
        "--ratio",
        "0.75",
        "--delta-r",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = read(&out.join("masks.csv"));
    let mut masked_per_sample = std::collections::HashMap::new();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let sample: usize = fields[0].parse().unwrap();
        *masked_per_sample.entry(sample).or_insert(0usize) += fields[2].parse::<usize>().unwrap();
    }
    assert_eq!(masked_per_sample.len(), 2);
    for (_, count) in masked_per_sample {
        assert_eq!(count, 12);
    }
    assert!(out.join("overlay_0000.pgm").exists());
    assert!(out.join("overlay_0001.pgm").exists());
}

#[test]
fn amr_gives_larger_ratio_to_larger_objects() {
    let tmp = tempfile::tempdir().unwrap();
    let large = tmp.path().join("large");
    let small = tmp.path().join("small");
    gen_images(&large, 3, 2, 4, 2); // 8 of 16 patches
    gen_images(&small, 3, 1, 2, 2); // 2 of 16 patches

    let ratio_of = |imgs: &Path, out: &Path| -> f32 {
        ok(&[
            "mask",
            "--images",
            imgs.to_str().unwrap(),
            "--patch-side",
            "8",
            "--strategy",
            "sbam-amr",
            "--ratio",
            "0.75",
            "--out",
            out.to_str().unwrap(),
        ]);
        let csv = read(&out.join("masks.csv"));
        let line = csv.lines().nth(1).unwrap();
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    let r_large = ratio_of(&large, &tmp.path().join("ml"));
    let r_small = ratio_of(&small, &tmp.path().join("ms"));
    assert!(r_large > r_small, "{r_large} vs {r_small}");
    let bounds = 0.75 - 0.15..=0.75 + 0.15;
    assert!(bounds.contains(&r_large) && bounds.contains(&r_small));
}

#[test]
fn out_of_range_ratio_band_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    gen_images(&imgs, 1, 2, 2, 0);
    let out = sbam(
        &[
            "mask",
            "--images",
            imgs.to_str().unwrap(),
            "--strategy",
            "sbam-amr",
            "--ratio",
            "0.8",
            "--delta-r",
            "0.3",
            "--out",
            tmp.path().join("m").to_str().unwrap(),
        ],
        &[],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("invalid config"), "{stderr}");
}

#[test]
fn sweep_is_deterministic_and_rejects_single_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    gen_images(&imgs, 10, 2, 2, 7);

    let csv_a = tmp.path().join("a.csv");
    let csv_b = tmp.path().join("b.csv");
    let run = |out: &Path, threads: &str| {
        let o = sbam(
            &[
                "sweep",
                "--images",
                imgs.to_str().unwrap(),
                "--strategies",
                "random,sbam",
                "--ratios",
                "0.3,0.5,0.75,0.9",
                "--seed",
                "7",
                "--epochs",
                "6",
                "--out",
                out.to_str().unwrap(),
            ],
            &[("SBAM_THREADS", threads)],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&csv_a, "1");
    run(&csv_b, "4");
    assert_eq!(
        std::fs::read(&csv_a).unwrap(),
        std::fs::read(&csv_b).unwrap()
    );
    let text = read(&csv_a);
    assert!(text
        .starts_with("# performance=neg_holdout_loss\nmodel,ratio,performance,pimr,global_pimr\n"));
    assert_eq!(text.lines().count(), 2 + 8);

    let bad = sbam(
        &[
            "sweep",
            "--images",
            imgs.to_str().unwrap(),
            "--ratios",
            "0.5",
            "--out",
            tmp.path().join("c.csv").to_str().unwrap(),
        ],
        &[],
    );
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("2 ratios"));
}

#[test]
fn train_ablation_strategies_emit_distinct_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    // Texture makes background tokens distinct from one another; on perfectly
    // flat patches the two ablations would mask different indices of
    // identical vectors and the curves would tie exactly.
    gen_textured(&imgs, 8, 2, 2, 11, 0.05);

    let run = |strategy: &str, out: &Path| -> String {
        ok(&[
            "train",
            "--images",
            imgs.to_str().unwrap(),
            "--strategy",
            strategy,
            "--epochs",
            "10",
            "--out",
            out.to_str().unwrap(),
        ]);
        read(&out.join("loss.csv"))
    };
    let a = run("salience-only", &tmp.path().join("t1"));
    let b = run("sbam", &tmp.path().join("t2"));
    assert!(a.starts_with("epoch,loss\n"));
    assert_eq!(a.lines().count(), 11);
    assert_ne!(a, b);
    assert!(tmp.path().join("t1").join("params.sbtn").exists());
}

#[test]
fn config_file_fills_flags_and_cli_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    gen_images(&imgs, 2, 2, 2, 3);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "images={}\npatch-side=8\nstrategy=salience-only\nratio=0.5\nout={}\n",
            imgs.display(),
            tmp.path().join("from_file").display()
        ),
    )
    .unwrap();

    let out = sbam(&["--config", cfg.to_str().unwrap(), "mask"], &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("strategy=salience-only"), "{stderr}");
    assert!(stderr.contains("ratio=0.5"), "{stderr}");
    assert!(tmp.path().join("from_file").join("masks.csv").exists());

    // Explicit flag beats the file value.
    let out = sbam(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "mask",
            "--ratio",
            "0.25",
            "--out",
            tmp.path().join("cli_wins").to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratio=0.25"));
}

#[test]
fn invalid_threads_env_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    gen_images(&imgs, 4, 2, 2, 0);
    let out = sbam(
        &[
            "sweep",
            "--images",
            imgs.to_str().unwrap(),
            "--ratios",
            "0.3,0.5",
            "--epochs",
            "2",
            "--out",
            tmp.path().join("s.csv").to_str().unwrap(),
        ],
        &[("SBAM_THREADS", "many")],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SBAM_THREADS"));
}
