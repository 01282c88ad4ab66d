//! HTTP/JSON clients for an editor, face detector, segmenter and parser
//! running out of process.
//!
//! Every call is a `POST` of a JSON object to `{endpoint}/{route}` with the
//! protocol version in [`VERSION_HEADER`]. Images travel as base64 PNG:
//! RGB images sRGB-encoded, masks as 0/255 grayscale, parsings as raw
//! label values. Any transport, status or decoding failure surfaces as
//! [`Error::EditorUnavailable`] so the scheduler's retry and abort rules
//! apply.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use gsvton_core::edit::{AuxProvider, EditPass, EditRequest, Editor, TargetRegion};
use gsvton_core::refine::{FaceDetector, Segmenter};
use gsvton_core::{Error, LabelMap, Mask, Result, RgbImage};

use crate::io::png;

pub const VERSION_HEADER: &str = "X-GSVTON-Version";
pub const PROTOCOL_VERSION: &str = "gsvton-edit/1";
/// Default endpoint when a job leaves it empty.
pub const ENDPOINT_ENV: &str = "GSVTON_EDIT_ENDPOINT";

pub fn b64_rgb(img: &RgbImage) -> String {
    B64.encode(png::encode_rgb(img))
}

pub fn b64_mask(mask: &Mask) -> String {
    B64.encode(png::encode_mask(mask))
}

pub fn b64_labels(labels: &LabelMap) -> String {
    let (w, h) = labels.dims();
    B64.encode(png::encode_gray(w, h, labels.labels()))
}

fn unbase64(s: &str) -> std::result::Result<Vec<u8>, String> {
    B64.decode(s).map_err(|e| format!("bad base64: {e}"))
}

/// A connection to one service endpoint.
#[derive(Clone)]
pub struct RemoteClient {
    endpoint: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient").field("endpoint", &self.endpoint).finish()
    }
}

impl RemoteClient {
    pub fn new(endpoint: &str, timeout_secs: f64) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(timeout_secs))
            .build();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Posts `body` to `route` and returns the parsed response object.
    pub fn call(&self, route: &str, view_index: u32, body: &Value) -> Result<Value> {
        let fail = |reason: String| Error::EditorUnavailable { view_index, reason };
        let url = format!("{}/{route}", self.endpoint);
        let resp = self
            .agent
            .post(&url)
            .set(VERSION_HEADER, PROTOCOL_VERSION)
            .send_json(body)
            .map_err(|e| fail(format!("POST {url}: {e}")))?;
        if let Some(v) = resp.header(VERSION_HEADER) {
            if v != PROTOCOL_VERSION {
                return Err(fail(format!("{url} speaks {v}, expected {PROTOCOL_VERSION}")));
            }
        }
        let value: Value = resp.into_json().map_err(|e| fail(format!("{url}: unreadable response: {e}")))?;
        if !value.is_object() {
            return Err(fail(format!("{url}: response is not a JSON object")));
        }
        Ok(value)
    }

    fn field<'v>(&self, value: &'v Value, name: &str, view_index: u32) -> Result<&'v Value> {
        value.get(name).ok_or_else(|| Error::EditorUnavailable {
            view_index,
            reason: format!("{}: response lacks `{name}`", self.endpoint),
        })
    }

    fn bytes_field(&self, value: &Value, name: &str, view_index: u32) -> Result<Vec<u8>> {
        let s = self.field(value, name, view_index)?.as_str().ok_or_else(|| Error::EditorUnavailable {
            view_index,
            reason: format!("`{name}` is not a string"),
        })?;
        unbase64(s).map_err(|reason| Error::EditorUnavailable { view_index, reason })
    }
}

fn bad(view_index: u32, what: &str, e: impl std::fmt::Display) -> Error {
    Error::EditorUnavailable {
        view_index,
        reason: format!("{what}: {e}"),
    }
}

/// `POST /edit`.
#[derive(Debug, Clone)]
pub struct RemoteEditor {
    pub client: RemoteClient,
}

impl Editor for RemoteEditor {
    fn edit(&self, r: &EditRequest<'_>) -> Result<RgbImage> {
        let mut body = json!({
            "image": b64_rgb(r.image),
            "garment": b64_rgb(r.prompt.garment_image()),
            "mask": b64_mask(&r.aux.inpaint_mask),
            "parsing": b64_labels(&r.aux.parsing),
            "keypoints": r.aux.pose_keypoints,
            "view_index": r.view_index,
            "seed": r.seed,
            "pass": match r.pass {
                EditPass::Initial => "initial",
                EditPass::ReEdit => "re_edit",
            },
        });
        if let Some(dp) = &r.aux.dense_pose {
            body["dense_pose"] = json!(dp);
        }
        let resp = self.client.call("edit", r.view_index, &body)?;
        let bytes = self.client.bytes_field(&resp, "image", r.view_index)?;
        png::decode_rgb(&bytes).map_err(|e| bad(r.view_index, "edited image", e))
    }
}

/// `POST /face`; the response carries `keypoints`, `null` when no face
/// is visible.
#[derive(Debug, Clone)]
pub struct RemoteFaceDetector {
    pub client: RemoteClient,
}

impl FaceDetector for RemoteFaceDetector {
    fn detect(&self, view_index: u32, image: &RgbImage) -> Result<Option<Vec<[f64; 2]>>> {
        let body = json!({ "image": b64_rgb(image), "view_index": view_index, "seed": 0 });
        let resp = self.client.call("face", view_index, &body)?;
        let k = self.client.field(&resp, "keypoints", view_index)?;
        serde_json::from_value(k.clone()).map_err(|e| bad(view_index, "keypoints", e))
    }
}

/// `POST /segment` with the target region; the response carries `mask`.
#[derive(Debug, Clone)]
pub struct RemoteSegmenter {
    pub client: RemoteClient,
}

impl Segmenter for RemoteSegmenter {
    fn segment(&self, view_index: u32, image: &RgbImage, region: TargetRegion) -> Result<Mask> {
        let body = json!({
            "image": b64_rgb(image),
            "view_index": view_index,
            "seed": 0,
            "target_region": region.as_str(),
        });
        let resp = self.client.call("segment", view_index, &body)?;
        let bytes = self.client.bytes_field(&resp, "mask", view_index)?;
        let mask = png::decode_mask(&bytes).map_err(|e| bad(view_index, "mask", e))?;
        image.ensure_same_dims(mask.dims())?;
        Ok(mask)
    }
}

/// `POST /parse` with the target region; the response carries `parsing`.
#[derive(Debug, Clone)]
pub struct RemoteParser {
    pub client: RemoteClient,
}

impl AuxProvider for RemoteParser {
    fn parse(&self, view_index: u32, image: &RgbImage, region: TargetRegion) -> Result<LabelMap> {
        let body = json!({
            "image": b64_rgb(image),
            "view_index": view_index,
            "seed": 0,
            "target_region": region.as_str(),
        });
        let resp = self.client.call("parse", view_index, &body)?;
        let bytes = self.client.bytes_field(&resp, "parsing", view_index)?;
        let (w, h, data) = png::decode_gray(&bytes).map_err(|e| bad(view_index, "parsing", e))?;
        let labels = LabelMap::new(w, h, data)?;
        image.ensure_same_dims(labels.dims())?;
        Ok(labels)
    }
}

/// Falls back to a second segmenter when the first has no data for a view.
pub struct SegmenterChain<'a> {
    pub first: &'a dyn Segmenter,
    pub fallback: &'a dyn Segmenter,
}

impl Segmenter for SegmenterChain<'_> {
    fn segment(&self, view_index: u32, image: &RgbImage, region: TargetRegion) -> Result<Mask> {
        match self.first.segment(view_index, image, region) {
            Err(Error::MissingAux(_)) => self.fallback.segment(view_index, image, region),
            other => other,
        }
    }
}
