use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use gsvton::cli::main_with_args;
use gsvton::io::png;
use gsvton::remote::{
    b64_rgb, RemoteClient, RemoteEditor, RemoteFaceDetector, RemoteParser, RemoteSegmenter, PROTOCOL_VERSION,
    VERSION_HEADER,
};
use gsvton_core::edit::{
    labels, synthesize_aux_inputs, AuxProvider, EditPass, EditRequest, Editor, GarmentPrompt, TargetRegion,
};
use gsvton_core::refine::{FaceDetector, Segmenter};
use gsvton_core::{Error, LabelMap, Mask, RgbImage};

#[derive(Debug, Clone)]
struct Seen {
    route: String,
    version: Option<String>,
    body: Value,
}

type Handler = dyn Fn(&str, &Value) -> Value + Send + Sync;

/// Minimal HTTP/1.1 server: one request per connection, JSON in and out.
fn serve(version: &'static str, handler: Box<Handler>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let route = line.split_whitespace().nth(1).unwrap_or("/").trim_start_matches('/').to_string();
            let (mut len, mut ver) = (0usize, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                if k.eq_ignore_ascii_case("content-length") {
                    len = v.trim().parse().unwrap();
                }
                if k.eq_ignore_ascii_case(VERSION_HEADER) {
                    ver = Some(v.trim().to_string());
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap();
            let reply = handler(&route, &body).to_string();
            log.lock().unwrap().push(Seen {
                route,
                version: ver,
                body,
            });
            let resp = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\n{VERSION_HEADER}: {version}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    (url, seen)
}

fn image() -> RgbImage {
    RgbImage::from_fn(12, 10, |x, y| [x as f64 / 11.0, y as f64 / 9.0, 0.5])
}

fn parsing() -> LabelMap {
    LabelMap::new(12, 10, (0..120).map(|i| if i % 12 < 6 { labels::TORSO } else { labels::BACKGROUND }).collect()).unwrap()
}

/// Paints the masked pixels of the request image solid green.
fn green_editor(route: &str, body: &Value) -> Value {
    match route {
        "edit" => {
            let img = png::decode_rgb(&B64.decode(body["image"].as_str().unwrap()).unwrap()).unwrap();
            let mask = png::decode_mask(&B64.decode(body["mask"].as_str().unwrap()).unwrap()).unwrap();
            let mut out = img.clone();
            for y in 0..img.height() {
                for x in 0..img.width() {
                    if mask.get(x, y) {
                        out.set(x, y, [0.0, 1.0, 0.0]);
                    }
                }
            }
            json!({ "image": b64_rgb(&out) })
        }
        "face" => json!({ "keypoints": null }),
        "segment" | "parse" => {
            let img = png::decode_rgb(&B64.decode(body["image"].as_str().unwrap()).unwrap()).unwrap();
            let (w, h) = img.dims();
            let p = LabelMap::new(w, h, (0..w * h).map(|i| if (i % w) < w / 2 { labels::TORSO } else { labels::BACKGROUND }).collect()).unwrap();
            if route == "segment" {
                json!({ "mask": B64.encode(png::encode_mask(&p.mask_of(&[labels::TORSO]))) })
            } else {
                json!({ "parsing": B64.encode(png::encode_gray(w, h, p.labels())) })
            }
        }
        _ => json!({}),
    }
}

#[test]
fn edit_request_carries_the_protocol_fields() {
    let (url, seen) = serve(PROTOCOL_VERSION, Box::new(green_editor));
    let editor = RemoteEditor {
        client: RemoteClient::new(&url, 5.0),
    };
    let img = image();
    let prompt = GarmentPrompt::new(RgbImage::new(4, 4, [0.8, 0.2, 0.2]), TargetRegion::Upper).unwrap();
    let mut ann = gsvton_core::dataset::ViewAnnotations {
        parsing: Some(parsing()),
        ..Default::default()
    };
    ann.pose_keypoints = Some(vec![[1.0, 2.0]]);
    let aux = synthesize_aux_inputs(7, &img, &ann, TargetRegion::Upper, None).unwrap();
    let out = editor
        .edit(&EditRequest {
            view_index: 7,
            image: &img,
            prompt: &prompt,
            aux: &aux,
            seed: 42,
            pass: EditPass::Initial,
        })
        .unwrap();
    assert_eq!(out.get(0, 0), [0.0, 1.0, 0.0]);
    assert_eq!(out.get(11, 0), png::decode_rgb(&png::encode_rgb(&img)).unwrap().get(11, 0));
    let s = seen.lock().unwrap()[0].clone();
    assert_eq!(s.route, "edit");
    assert_eq!(s.version.as_deref(), Some(PROTOCOL_VERSION));
    for field in ["image", "garment", "mask", "parsing", "keypoints", "view_index", "seed"] {
        assert!(s.body.get(field).is_some(), "{field}");
    }
    assert!(s.body.get("dense_pose").is_none());
    assert_eq!(s.body["view_index"], 7);
    assert_eq!(s.body["seed"], 42);
    assert_eq!(s.body["keypoints"], json!([[1.0, 2.0]]));
}

#[test]
fn face_segment_and_parse_endpoints() {
    let (url, seen) = serve(
        PROTOCOL_VERSION,
        Box::new(|route, body| match route {
            "face" => json!({ "keypoints": [[1.0, 1.0], [5.0, 1.0], [3.0, 4.0]] }),
            _ => green_editor(route, body),
        }),
    );
    let client = RemoteClient::new(&url, 5.0);
    let img = image();
    let face = RemoteFaceDetector { client: client.clone() }.detect(0, &img).unwrap();
    assert_eq!(face, Some(vec![[1.0, 1.0], [5.0, 1.0], [3.0, 4.0]]));
    let mask = RemoteSegmenter { client: client.clone() }.segment(1, &img, TargetRegion::Upper).unwrap();
    assert_eq!(mask, Mask::from_fn(12, 10, |x, _| x < 6));
    let p = RemoteParser { client }.parse(2, &img, TargetRegion::Lower).unwrap();
    assert_eq!(p, parsing());
    let seen = seen.lock().unwrap();
    assert_eq!(seen[1].body["target_region"], "upper");
    assert_eq!(seen[2].body["target_region"], "lower");
}

#[test]
fn no_face_is_none() {
    let (url, _) = serve(PROTOCOL_VERSION, Box::new(green_editor));
    let det = RemoteFaceDetector {
        client: RemoteClient::new(&url, 5.0),
    };
    assert_eq!(det.detect(0, &image()).unwrap(), None);
}

#[test]
fn version_mismatch_is_unavailable() {
    let (url, _) = serve("gsvton-edit/2", Box::new(green_editor));
    let det = RemoteFaceDetector {
        client: RemoteClient::new(&url, 5.0),
    };
    assert!(matches!(det.detect(3, &image()), Err(Error::EditorUnavailable { view_index: 3, .. })));
}

fn closed_port() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", l.local_addr().unwrap());
    drop(l);
    url
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let seg = RemoteSegmenter {
        client: RemoteClient::new(&closed_port(), 1.0),
    };
    match seg.segment(5, &image(), TargetRegion::Upper) {
        Err(Error::EditorUnavailable { view_index, reason }) => {
            assert_eq!(view_index, 5);
            assert!(reason.contains("/segment"));
        }
        other => panic!("expected unavailable, got {other:?}"),
    }
}

fn synth(dir: &std::path::Path) {
    let out = dir.join("scene");
    let code = main_with_args(["gsvton", "synth", "--out", out.to_str().unwrap(), "--views", "3", "--size", "48"]);
    assert_eq!(code, 0);
}

fn remote_job(dir: &std::path::Path, endpoint: &str) -> std::path::PathBuf {
    let job_path = dir.join("scene/job.json");
    let mut job: Value = serde_json::from_slice(&std::fs::read(&job_path).unwrap()).unwrap();
    job["editor"] = json!({ "kind": "remote", "endpoint": endpoint, "seed": 1, "timeout_secs": 2.0 });
    job["optimize_iters_per_round"] = json!(3);
    job["refine"] = json!({ "retries": 0 });
    let p = dir.join("scene/remote_job.json");
    std::fs::write(&p, job.to_string()).unwrap();
    p
}

#[test]
fn cli_edit_through_a_remote_editor() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let (url, seen) = serve(PROTOCOL_VERSION, Box::new(green_editor));
    let job = remote_job(dir.path(), &url);
    let out = dir.path().join("out");
    let code = main_with_args(["gsvton", "edit", "--job", job.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.join("edited.ply").exists());
    let routes: Vec<String> = seen.lock().unwrap().iter().map(|s| s.route.clone()).collect();
    assert_eq!(routes.iter().filter(|r| *r == "edit").count(), 3);
}

#[test]
fn bad_endpoint_fails_with_an_error_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let job = remote_job(dir.path(), &closed_port());
    let out = dir.path().join("out");
    let code = main_with_args(["gsvton", "edit", "--job", job.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_ne!(code, 0);
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "editor_unavailable");
    assert_eq!(report["command"], "edit");
    assert_eq!(report["failures"].as_array().unwrap().len(), 3);
    assert!(!out.join("edited.ply").exists());
}

#[test]
fn empty_endpoint_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let (url, seen) = serve(PROTOCOL_VERSION, Box::new(green_editor));
    let job = remote_job(dir.path(), "");
    std::env::set_var(gsvton::remote::ENDPOINT_ENV, &url);
    let out = dir.path().join("out");
    let code = main_with_args(["gsvton", "edit", "--job", job.to_str().unwrap(), "--out", out.to_str().unwrap(), "--no-renders"]);
    assert_eq!(code, 0);
    assert!(!seen.lock().unwrap().is_empty());
}
