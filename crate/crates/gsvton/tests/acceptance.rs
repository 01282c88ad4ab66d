//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod oracle;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gsvton_core::dataset::{audit_atomic_rounds, has_interleaved_updates, ViewDataset};
use gsvton_core::edit::{labels, synthesize_aux_inputs, EditPass, EditRequest, Editor, GarmentPrompt, MockEditor, TargetRegion};
use gsvton_core::metrics::{psnr, psnr_in, ssim};
use gsvton_core::optimize::{fit_scene, FitConfig};
use gsvton_core::refine::{
    face_composite, nullspace_restore, select_outlier_views, AnnotatedFaceDetector, AnnotatedSegmenter, DegradationOp,
    FaceNet, GarmentMask, Segmenter, SmoothingPrior,
};
use gsvton_core::render::{backward, render_view, RenderSettings};
use gsvton_core::scene::gaussian_bits;
use gsvton_core::strategy::{mean_chroma, run_job, Components, EditJob, EditReport, Strategy};
use gsvton_core::synth::{perturb_colors, red_garment_prompt, SynthConfig, SynthScene};
use gsvton_core::{CameraView, Gaussian, GaussianCloud, Mask, RgbImage};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_camera(rng: &mut ChaCha8Rng, size: usize) -> CameraView {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let elev = rng.random_range(-0.4..0.4);
    let r = rng.random_range(3.5..5.0);
    let eye = [r * theta.cos() * f64::cos(elev), r * f64::sin(elev), r * theta.sin() * f64::cos(elev)];
    let f = rng.random_range(40.0..70.0);
    CameraView::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], [f, f * rng.random_range(0.9..1.1)], size, size, 0).unwrap()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
    let gs = (0..n)
        .map(|_| {
            let p = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let q = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let s = std::array::from_fn(|_| rng.random_range(0.05..0.4));
            let o = rng.random_range(0.1..0.9);
            let sh = (0..4)
                .map(|k| {
                    let a = if k == 0 { 1.2 } else { 0.3 };
                    std::array::from_fn(|_| rng.random_range(-a..a))
                })
                .collect();
            Gaussian::new(p, q, s, o, sh).unwrap()
        })
        .collect();
    GaussianCloud::new(gs).unwrap()
}

fn renderer_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(1..=50);
        let cloud = random_cloud(&mut rng, n);
        let cam = random_camera(&mut rng, 64);
        let bg = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let got = render_view(&cloud, &cam, &RenderSettings { background: bg }).unwrap().pixels;
        worst = worst.max(oracle::max_abs_diff(&got, &oracle::naive_render(&cloud, &cam, bg)));
    }
    check(worst <= 1e-5, format!("max channel error {worst:.2e} over 50 scenes"))
}

fn weighted_loss(cloud: &GaussianCloud, cam: &CameraView, bg: [f64; 3], w: &[[f64; 3]]) -> f64 {
    let img = render_view(cloud, cam, &RenderSettings { background: bg }).unwrap().pixels;
    img.pixels().iter().zip(w).map(|(p, q)| p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).sum()
}

fn gradient_check() -> Outcome {
    const H: f64 = 1e-4;
    let (mut pass, mut total) = (0usize, 0usize);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let cloud = random_cloud(&mut rng, 10);
        let cam = random_camera(&mut rng, 48);
        let bg = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let w: Vec<[f64; 3]> = (0..48 * 48).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let grad = backward(&cloud, &cam, &RenderSettings { background: bg }, &w).unwrap();
        for (i, g) in grad.grads.iter().enumerate() {
            let mut params: Vec<(f64, Box<dyn Fn(&mut Gaussian, f64)>)> = Vec::new();
            for k in 0..3 {
                params.push((g.position[k], Box::new(move |x, d| {
                    let mut p = x.position();
                    p[k] += d;
                    x.set_position(p);
                })));
                params.push((g.scale[k], Box::new(move |x, d| {
                    let mut s = x.scale();
                    s[k] += d;
                    x.set_scale(s);
                })));
            }
            for k in 0..4 {
                params.push((g.rotation[k], Box::new(move |x, d| {
                    let mut q = x.rotation().0;
                    q[k] += d;
                    x.set_rotation(q);
                })));
            }
            params.push((g.opacity, Box::new(|x, d| x.set_opacity(x.opacity() + d))));
            for (k, c) in g.sh.iter().enumerate() {
                for ch in 0..3 {
                    params.push((c[ch], Box::new(move |x, d| {
                        let mut v = x.sh()[k];
                        v[ch] += d;
                        x.set_sh_coeff(k, v);
                    })));
                }
            }
            for (analytic, perturb) in params {
                let eval = |d: f64| {
                    let mut c = cloud.clone();
                    perturb(c.get_mut(i).unwrap(), d);
                    weighted_loss(&c, &cam, bg, &w)
                };
                let numeric = (eval(H) - eval(-H)) / (2.0 * H);
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                total += 1;
                if (analytic - numeric).abs() / scale < 1e-3 {
                    pass += 1;
                }
            }
        }
    }
    let frac = pass as f64 / total as f64;
    check(frac >= 0.95, format!("{pass}/{total} parameters within 1e-3 ({:.1}%)", 100.0 * frac))
}

fn synth(views: usize) -> SynthScene {
    SynthScene::build(&SynthConfig {
        views,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn reconstruction() -> Outcome {
    let scene = synth(24);
    let ds = scene.dataset().unwrap();
    let init = perturb_colors(&scene.cloud, 0.35, 3);
    let (fitted, _) = fit_scene(&ds, init.clone(), 2000, &FitConfig::default()).unwrap();
    let mean = |c: &GaussianCloud| {
        ds.records()
            .iter()
            .map(|r| psnr(&render_view(c, r.camera(), &RenderSettings::default()).unwrap().pixels, r.original()).unwrap())
            .sum::<f64>()
            / ds.len() as f64
    };
    let (before, after) = (mean(&init), mean(&fitted));
    check(after >= 30.0, format!("mean PSNR {before:.1} dB -> {after:.1} dB over 24 views"))
}

fn prompt() -> GarmentPrompt {
    GarmentPrompt::new(red_garment_prompt(64), TargetRegion::Upper).unwrap()
}

fn edit_view(ds: &ViewDataset, v: u32, editor: &MockEditor, seed: u64, prompt: &GarmentPrompt) -> RgbImage {
    let rec = ds.record(v).unwrap();
    let aux = synthesize_aux_inputs(v, rec.original(), &rec.annotations, TargetRegion::Upper, None).unwrap();
    editor
        .edit(&EditRequest {
            view_index: v,
            image: rec.original(),
            prompt,
            aux: &aux,
            seed,
            pass: EditPass::Initial,
        })
        .unwrap()
}

fn outlier_detection() -> Outcome {
    let scene = synth(24);
    let ds = scene.dataset().unwrap();
    let seg = AnnotatedSegmenter::from_dataset(&ds);
    let prompt = prompt();
    let (mut tp, mut fp, mut missed, mut clean_flags) = (0, 0, 0, 0);
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + trial);
        let start = rng.random_range(0..22u32);
        let views = [start, start + 1, start + 2];
        let decoy = views[rng.random_range(0..3)];
        let jitter = rng.random_range(0.0..=0.2);
        for planted in [true, false] {
            let mut editor = MockEditor::new(jitter);
            if planted {
                editor = editor.with_sabotage([decoy]);
            }
            let masks: Vec<GarmentMask> = views
                .iter()
                .map(|&v| {
                    let img = edit_view(&ds, v, &editor, trial, &prompt);
                    let m = seg.segment(v, &img, TargetRegion::Upper).unwrap();
                    GarmentMask::new(&img, m, v).unwrap()
                })
                .collect();
            let flagged = select_outlier_views(&masks, 0.75);
            if planted {
                tp += flagged.iter().filter(|&&v| v == decoy).count();
                fp += flagged.iter().filter(|&&v| v != decoy).count();
                missed += usize::from(!flagged.contains(&decoy));
            } else {
                clean_flags += flagged.len();
            }
        }
    }
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    let recall = tp as f64 / (tp + missed) as f64;
    check(
        precision == 1.0 && recall == 1.0 && clean_flags == 0,
        format!("precision {precision:.3}, recall {recall:.3}, {clean_flags} flags on clean triples"),
    )
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
}

fn data_consistency() -> Outcome {
    let (mut consistency, mut laws, mut op_err) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + i);
        let (w, h) = (2 * rng.random_range(6..20), 2 * rng.random_range(6..20));
        let x = random_image(&mut rng, w, h);
        let z = random_image(&mut rng, w, h);
        let keep: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.6)).collect();
        let mask = Mask::from_fn(w, h, |px, py| keep[py * w + px]);
        let ops = [
            (DegradationOp::Mask(mask), oracle::mask_apply(&x, &keep)),
            (DegradationOp::Downsample { factor: 2 }, oracle::downsample2(&x)),
        ];
        for (op, expected) in ops {
            let y = op.apply(&x).unwrap();
            op_err = op_err.max(oracle::max_abs_diff(&y, &expected));
            let restored = nullspace_restore(&y, &op, &SmoothingPrior::default()).unwrap();
            consistency = consistency.max(oracle::max_abs_diff(&op.apply(&restored).unwrap(), &y));
            // A†A is idempotent and symmetric; A A† A = A; A† A A† = A†.
            let px = op.projector(&x).unwrap();
            laws = laws.max(oracle::max_abs_diff(&op.projector(&px).unwrap(), &px));
            let dot = |a: &RgbImage, b: &RgbImage| -> f64 {
                a.pixels().iter().zip(b.pixels()).map(|(p, q)| p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).sum()
            };
            laws = laws.max((dot(&px, &z) - dot(&x, &op.projector(&z).unwrap())).abs());
            laws = laws.max(oracle::max_abs_diff(&op.apply(&px).unwrap(), &y));
            let pinv = op.pseudo_inverse(&y).unwrap();
            laws = laws.max(oracle::max_abs_diff(&op.projector(&pinv).unwrap(), &pinv));
        }
    }
    check(
        consistency < 1e-8 && laws <= 1e-10 && op_err <= 1e-12,
        format!("max |Ax - y| {consistency:.1e}, projector laws {laws:.1e}, operators vs oracle {op_err:.1e}"),
    )
}

fn box_blur(img: &RgbImage, region: &Mask, radius: isize) -> RgbImage {
    let (w, h) = img.dims();
    RgbImage::from_fn(w, h, |x, y| {
        if !region.get(x, y) {
            return img.get(x, y);
        }
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (nx, ny) = ((x as isize + dx).clamp(0, w as isize - 1), (y as isize + dy).clamp(0, h as isize - 1));
                let p = img.get(nx as usize, ny as usize);
                for c in 0..3 {
                    acc[c] += p[c];
                }
                n += 1.0;
            }
        }
        acc.map(|v| v / n)
    })
}

fn face_contract() -> Outcome {
    let scene = synth(24);
    let ds = scene.dataset().unwrap();
    let editor = MockEditor::new(0.2);
    let prompt = prompt();
    let (mut worst_in, mut blurred_in, mut exterior_ok, mut faces) = (f64::INFINITY, f64::INFINITY, true, 0);
    for (rec, cam) in ds.records().iter().zip(&scene.cameras) {
        let v = rec.view_index();
        let Some(kps) = scene.face_keypoints(cam) else { continue };
        faces += 1;
        let head = scene.parsing(cam).unwrap().mask_of(&[labels::HEAD]).dilate(2);
        let stage1 = box_blur(&edit_view(&ds, v, &editor, 1, &prompt), &head, 3);
        let face = FaceNet::new(kps, v, stage1.dims(), 4, 6).unwrap();
        let out = face_composite(rec.original(), &stage1, Some(&face), v).unwrap();
        worst_in = worst_in.min(psnr_in(&out, rec.original(), face.hull_mask()).unwrap());
        blurred_in = blurred_in.min(psnr_in(&stage1, rec.original(), face.hull_mask()).unwrap());
        for ((o, s), wt) in out.pixels().iter().zip(stage1.pixels()).zip(face.blend_weights()) {
            if wt == 0.0 && o.map(f64::to_bits) != s.map(f64::to_bits) {
                exterior_ok = false;
            }
        }
    }
    check(
        faces > 0 && worst_in >= 50.0 && exterior_ok,
        format!(
            "{faces} faces, min interior PSNR {worst_in:.1} dB (blurred input {blurred_in:.1} dB), exterior byte-equal: {exterior_ok}"
        ),
    )
}

fn run_mock(scene: &SynthScene, job: &EditJob) -> (GaussianCloud, EditReport, ViewDataset) {
    let mut ds = scene.dataset().unwrap();
    let editor = job.mock_editor().unwrap();
    let face = AnnotatedFaceDetector::from_dataset(&ds);
    let seg = AnnotatedSegmenter::from_dataset(&ds);
    let comps = Components {
        editor: &editor,
        face: &face,
        segmenter: &seg,
        aux: None,
    };
    let (cloud, report) = run_job(&scene.cloud, &mut ds, job, &prompt(), &comps).unwrap();
    (cloud, report, ds)
}

fn end_to_end() -> Outcome {
    let scene = synth(24);
    let job = EditJob::mock(Strategy::Err, 1, 480, 0.2, 7);
    let (edited, report, _) = run_mock(&scene, &job);
    let target = prompt().mean_chroma();
    let (mut chroma_err, mut face_psnr, mut bg_psnr) = (0.0f64, f64::INFINITY, f64::INFINITY);
    for cam in &scene.cameras {
        let parsing = scene.parsing(cam).unwrap();
        let before = render_view(&scene.cloud, cam, &RenderSettings::default()).unwrap().pixels;
        let after = render_view(&edited, cam, &RenderSettings::default()).unwrap().pixels;
        let torso = parsing.mask_of(&[labels::TORSO]).erode(2);
        if let Some(c) = mean_chroma(&after, &torso) {
            chroma_err = chroma_err.max(((c[0] - target[0]).powi(2) + (c[1] - target[1]).powi(2)).sqrt());
        }
        let head = parsing.mask_of(&[labels::HEAD]).erode(2);
        if head.count() > 0 {
            face_psnr = face_psnr.min(psnr_in(&after, &before, &head).unwrap());
        }
        let bg = parsing.mask_of(&[labels::BACKGROUND]).erode(2);
        bg_psnr = bg_psnr.min(psnr_in(&after, &before, &bg).unwrap());
    }
    let frozen = (0..edited.len())
        .filter(|i| !report.editable.contains(i))
        .all(|i| gaussian_bits(&edited.gaussians()[i]) == gaussian_bits(&scene.cloud.gaussians()[i]));
    check(
        chroma_err <= 0.05 && face_psnr >= 35.0 && bg_psnr >= 35.0 && frozen,
        format!(
            "torso chroma error {chroma_err:.3}, face PSNR {face_psnr:.1} dB, background PSNR {bg_psnr:.1} dB, non-editable identical: {frozen}"
        ),
    )
}

fn scheduler_ablation() -> Outcome {
    let scene = synth(24);
    let (mut wins, mut invariants) = (0, true);
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let err = run_mock(&scene, &EditJob::mock(Strategy::Err, 1, 480, 0.5, seed));
        let idu = run_mock(&scene, &EditJob::mock(Strategy::IterativeDu, 1, 480, 0.5, seed));
        let views = err.2.view_indices();
        invariants &= audit_atomic_rounds(err.2.update_log(), &views).is_ok()
            && !has_interleaved_updates(err.2.update_log())
            && has_interleaved_updates(idu.2.update_log())
            && err.1.total_steps == idu.1.total_steps;
        let (a, b) = (err.1.probes[0].hue_variance, idu.1.probes[0].hue_variance);
        wins += usize::from(a <= b);
        pairs.push(format!("{a:.1e}/{b:.1e}"));
    }
    check(
        wins >= 8 && invariants,
        format!("ERR <= IterativeDU in {wins}/10 trials, log invariants: {invariants} [{}]", pairs.join(" ")),
    )
}

fn cli(args: &[&str]) -> i32 {
    gsvton::cli::main_with_args(std::iter::once("gsvton").chain(args.iter().copied()))
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "renders"] {
        let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    assert_eq!(cli(&["synth", "--out", &s(&scene)]), 0);
    let job = s(&scene.join("job.json"));
    let outs = [tmp.path().join("a"), tmp.path().join("b")];
    for out in &outs {
        assert_eq!(cli(&["edit", "--job", &job, "--out", &s(out), "--seed", "1"]), 0);
    }
    let (a, b) = (files(&outs[0]), files(&outs[1]));
    let kinds = ["edited.ply", "report.json", ".png"];
    let covered = kinds.iter().all(|k| a.iter().any(|(n, _)| n.ends_with(k)));
    check(
        covered && a == b,
        format!("{} files compared, identical: {}", a.len(), a == b),
    )
}

fn metric_oracles() -> Outcome {
    let (mut dp, mut ds, mut self_exact) = (0.0f64, 0.0f64, true);
    for i in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + i);
        let (w, h) = (rng.random_range(11..40), rng.random_range(11..40));
        let a = random_image(&mut rng, w, h);
        let noise = rng.random_range(0.01..0.3);
        let b = a.map(|p| p.map(|v| (v + rng.random_range(-noise..noise)).clamp(0.0, 1.0)));
        dp = dp.max((psnr(&a, &b).unwrap() - oracle::psnr(&a, &b)).abs());
        ds = ds.max((ssim(&a, &b).unwrap() - oracle::ssim(&a, &b)).abs());
        self_exact &= ssim(&a, &a).unwrap() == 1.0;
    }
    check(
        dp <= 1e-9 && ds <= 1e-10 && self_exact,
        format!("PSNR diff {dp:.1e}, SSIM diff {ds:.1e}, ssim(x,x) == 1: {self_exact}"),
    )
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("renderer matches naive oracle", 60, renderer_oracle),
        ("analytic gradients match finite differences", 120, gradient_check),
        ("fit recovers perturbed colors", 300, reconstruction),
        ("triple outlier detection", 30, outlier_detection),
        ("null-space data consistency", 10, data_consistency),
        ("face compositing contract", 10, face_contract),
        ("end-to-end garment edit", 600, end_to_end),
        ("scheduler ablation", 900, scheduler_ablation),
        ("determinism", 600, determinism),
        ("metric oracles", 60, metric_oracles),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        let (ok, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {name}: {} ({detail}; {:.1} s of {budget} s)",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
