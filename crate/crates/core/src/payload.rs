//! Observation payload: gimbal pointing, a metadata-only camera stream and a
//! pluggable detector with a geometric stub.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use log::error;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{wrap_angle, Pose, UavId, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PayloadError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GimbalState {
    /// Body-frame azimuth, 0 = nose, positive to the right.
    pub pan: f64,
    /// 0 = horizon, −π/2 = straight down.
    pub tilt: f64,
    #[serde(default = "unit_zoom")]
    pub zoom: f64,
}

fn unit_zoom() -> f64 {
    1.0
}

impl Default for GimbalState {
    fn default() -> Self {
        GimbalState { pan: 0.0, tilt: 0.0, zoom: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GimbalAim {
    pub state: GimbalState,
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GimbalLimits {
    pub tilt_min: f64,
    pub tilt_max: f64,
}

impl Default for GimbalLimits {
    fn default() -> Self {
        GimbalLimits { tilt_min: -FRAC_PI_2, tilt_max: FRAC_PI_2 }
    }
}

/// Target position expressed in the UAV body frame.
fn body_vector(uav: &Pose, target: Vec3) -> Vec3 {
    (target - uav.position).rotate_z(-uav.yaw)
}

pub fn gimbal_point_at(uav: &Pose, target: Vec3) -> Result<GimbalAim, PayloadError> {
    gimbal_point_at_limited(uav, target, &GimbalLimits::default())
}

pub fn gimbal_point_at_limited(uav: &Pose, target: Vec3, limits: &GimbalLimits) -> Result<GimbalAim, PayloadError> {
    if !target.is_finite() || !uav.is_valid() {
        return Err(PayloadError::InvalidArgument("non-finite input".into()));
    }
    let r = body_vector(uav, target);
    if r.norm() == 0.0 {
        return Err(PayloadError::InvalidArgument("target coincides with the uav".into()));
    }
    let horizontal = r.horizontal_norm();
    let pan = if horizontal == 0.0 { 0.0 } else { wrap_angle(r.e.atan2(r.n)) };
    let raw_tilt = (-r.d).atan2(horizontal);
    let tilt = raw_tilt.clamp(limits.tilt_min, limits.tilt_max);
    Ok(GimbalAim { state: GimbalState { pan, tilt, zoom: 1.0 }, clamped: tilt != raw_tilt })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub seq: u64,
    pub timestamp_us: u64,
    pub width: u32,
    pub height: u32,
    pub source_uav: UavId,
}

#[derive(Debug, Clone)]
pub struct Camera {
    source: UavId,
    period_us: u64,
    width: u32,
    height: u32,
    next_due_us: Option<u64>,
    seq: u64,
}

impl Camera {
    pub fn new(source: UavId, fps: f64, width: u32, height: u32) -> Result<Self, PayloadError> {
        if !(fps.is_finite() && fps > 0.0 && fps <= 1000.0) {
            return Err(PayloadError::InvalidArgument(format!("fps must be in (0, 1000], got {fps}")));
        }
        if width == 0 || height == 0 {
            return Err(PayloadError::InvalidArgument("frame size must be nonzero".into()));
        }
        Ok(Camera { source, period_us: (1e6 / fps).round() as u64, width, height, next_due_us: None, seq: 0 })
    }

    /// 10 fps, 1280×720.
    pub fn default_for(source: UavId) -> Self {
        Camera::new(source, 10.0, 1280, 720).expect("defaults are valid")
    }

    pub fn stream_tick(&mut self, now_us: u64) -> Option<FrameMeta> {
        if self.next_due_us.is_some_and(|due| now_us < due) {
            return None;
        }
        let mut next = self.next_due_us.unwrap_or(now_us) + self.period_us;
        if next <= now_us {
            // fell behind; do not burst to catch up
            next = now_us + self.period_us;
        }
        self.next_due_us = Some(next);
        self.seq += 1;
        Some(FrameMeta { seq: self.seq, timestamp_us: now_us, width: self.width, height: self.height, source_uav: self.source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub track_id: u32,
    /// Body-frame azimuth from the observer's nose.
    pub bearing: f64,
    pub elevation: f64,
    pub confidence: f64,
}

impl Detection {
    pub fn is_valid(&self) -> bool {
        self.bearing.is_finite() && self.elevation.is_finite() && (0.0..=1.0).contains(&self.confidence)
    }
}

/// Published on `uav/<id>/detections`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub source_uav: UavId,
    pub frame_seq: u64,
    pub timestamp_us: u64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("detector failed: {0}")]
pub struct DetectorError(pub String);

/// A detection plugin. Must be a pure function of its inputs.
pub trait Detector {
    fn detect(
        &self,
        frame: &FrameMeta,
        truth: &[(UavId, Pose)],
        observer: &Pose,
        gimbal: &GimbalState,
    ) -> Result<Vec<Detection>, DetectorError>;
}

/// Perfect detector over simulated ground truth: range gate plus a 90°
/// square field of view centred on the gimbal.
#[derive(Debug, Clone, Copy)]
pub struct GeometricDetector {
    pub max_range_m: f64,
    pub half_fov: f64,
}

impl Default for GeometricDetector {
    fn default() -> Self {
        GeometricDetector { max_range_m: 200.0, half_fov: FRAC_PI_4 }
    }
}

impl Detector for GeometricDetector {
    fn detect(
        &self,
        frame: &FrameMeta,
        truth: &[(UavId, Pose)],
        observer: &Pose,
        gimbal: &GimbalState,
    ) -> Result<Vec<Detection>, DetectorError> {
        let mut out = Vec::new();
        for (id, pose) in truth {
            if *id == frame.source_uav {
                continue;
            }
            let r = body_vector(observer, pose.position);
            let range = r.norm();
            if range == 0.0 || range > self.max_range_m {
                continue;
            }
            let bearing = if r.horizontal_norm() == 0.0 { 0.0 } else { wrap_angle(r.e.atan2(r.n)) };
            let elevation = (-r.d).atan2(r.horizontal_norm());
            let off_pan = wrap_angle(bearing - gimbal.pan).abs();
            let off_tilt = (elevation - gimbal.tilt).abs();
            if off_pan > self.half_fov + 1e-12 || off_tilt > self.half_fov + 1e-12 {
                continue;
            }
            out.push(Detection { track_id: id.get() as u32, bearing, elevation, confidence: 1.0 });
        }
        Ok(out)
    }
}

/// Runs a plugin; failures and malformed output never reach the caller.
pub fn run_detector(
    plugin: &dyn Detector,
    frame: &FrameMeta,
    truth: &[(UavId, Pose)],
    observer: &Pose,
    gimbal: &GimbalState,
) -> Vec<Detection> {
    match plugin.detect(frame, truth, observer, gimbal) {
        Ok(mut d) => {
            let before = d.len();
            d.retain(Detection::is_valid);
            if d.len() != before {
                error!("uav {}: detector emitted {} malformed detections", frame.source_uav, before - d.len());
            }
            d
        }
        Err(e) => {
            error!("uav {}: {e}", frame.source_uav);
            Vec::new()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn pose(n: f64, e: f64, d: f64, yaw: f64) -> Pose {
        Pose { position: Vec3::new(n, e, d), yaw }
    }

    fn frame(src: u16) -> FrameMeta {
        FrameMeta { seq: 1, timestamp_us: 0, width: 640, height: 480, source_uav: UavId::new(src).unwrap() }
    }

    #[test]
    fn gimbal_examples() {
        let a = gimbal_point_at(&pose(0.0, 0.0, -10.0, 0.0), Vec3::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(a.state.pan, 0.0);
        assert!((a.state.tilt + FRAC_PI_2).abs() < 1e-12);
        let a = gimbal_point_at(&pose(0.0, 0.0, -10.0, 0.0), Vec3::new(10.0, 0.0, -10.0)).unwrap();
        assert_eq!((a.state.pan, a.state.tilt), (0.0, 0.0));
        let a = gimbal_point_at(&pose(0.0, 0.0, -10.0, FRAC_PI_2), Vec3::new(0.0, 10.0, -10.0)).unwrap();
        assert!(a.state.pan.abs() < 1e-12 && a.state.tilt.abs() < 1e-12);
        assert!(!a.clamped);
        assert!(gimbal_point_at(&pose(1.0, 2.0, 3.0, 0.0), Vec3::new(1.0, 2.0, 3.0)).is_err());
        // straight behind lands on +π, not −π
        let a = gimbal_point_at(&pose(0.0, 0.0, -10.0, 0.0), Vec3::new(-10.0, 0.0, -10.0)).unwrap();
        assert_eq!(a.state.pan, PI);
    }

    #[test]
    fn gimbal_clamps_to_limits() {
        let limits = GimbalLimits { tilt_min: -1.0, tilt_max: 0.3 };
        let a = gimbal_point_at_limited(&pose(0.0, 0.0, -10.0, 0.0), Vec3::new(0.0, 0.0, 0.0), &limits).unwrap();
        assert!(a.clamped);
        assert_eq!(a.state.tilt, -1.0);
    }

    #[test]
    fn stream_examples() {
        let id = UavId::new(1).unwrap();
        let mut c = Camera::default_for(id);
        assert_eq!(c.stream_tick(0).unwrap().seq, 1);
        assert!(c.stream_tick(50_000).is_none());
        assert_eq!(c.stream_tick(100_000).unwrap().seq, 2);

        let mut c = Camera::default_for(id);
        let frames: Vec<_> = (0..10).filter_map(|k| c.stream_tick(k * 100_000)).collect();
        assert_eq!(frames.len(), 10);
        assert!(frames.windows(2).all(|w| w[1].seq == w[0].seq + 1));

        let mut c = Camera::default_for(id);
        let n = (0..1000).filter_map(|k| c.stream_tick(k * 1_000)).count();
        assert_eq!(n, 10);
        assert!(Camera::new(id, 0.0, 1, 1).is_err());
        assert!(Camera::new(id, 10.0, 0, 1).is_err());
    }

    #[test]
    fn detector_examples() {
        let det = GeometricDetector::default();
        let obs = pose(0.0, 0.0, -10.0, 0.0);
        let g = GimbalState::default();
        let ahead = [(UavId::new(5).unwrap(), pose(50.0, 0.0, -10.0, 0.0))];
        let d = run_detector(&det, &frame(1), &ahead, &obs, &g);
        assert_eq!(d, vec![Detection { track_id: 5, bearing: 0.0, elevation: 0.0, confidence: 1.0 }]);
        let far = [(UavId::new(5).unwrap(), pose(300.0, 0.0, -10.0, 0.0))];
        assert!(run_detector(&det, &frame(1), &far, &obs, &g).is_empty());
        let behind = [(UavId::new(5).unwrap(), pose(-50.0, 0.0, -10.0, 0.0))];
        assert!(run_detector(&det, &frame(1), &behind, &obs, &g).is_empty());
        let me = [(UavId::new(1).unwrap(), obs)];
        assert!(run_detector(&det, &frame(1), &me, &obs, &g).is_empty());
    }

    struct Broken;
    impl Detector for Broken {
        fn detect(&self, _: &FrameMeta, _: &[(UavId, Pose)], _: &Pose, _: &GimbalState) -> Result<Vec<Detection>, DetectorError> {
            Err(DetectorError("model not loaded".into()))
        }
    }

    struct Sloppy;
    impl Detector for Sloppy {
        fn detect(&self, _: &FrameMeta, _: &[(UavId, Pose)], _: &Pose, _: &GimbalState) -> Result<Vec<Detection>, DetectorError> {
            Ok(vec![
                Detection { track_id: 1, bearing: 0.0, elevation: 0.0, confidence: 1.5 },
                Detection { track_id: 2, bearing: 0.1, elevation: 0.0, confidence: 0.5 },
            ])
        }
    }

    #[test]
    fn plugin_failures_are_contained() {
        let obs = pose(0.0, 0.0, -10.0, 0.0);
        assert!(run_detector(&Broken, &frame(1), &[], &obs, &GimbalState::default()).is_empty());
        let d = run_detector(&Sloppy, &frame(1), &[], &obs, &GimbalState::default());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].track_id, 2);
    }

    proptest! {
        #[test]
        fn aim_reprojects_onto_target(
            n in -100.0f64..100.0, e in -100.0f64..100.0, d in -50.0f64..-1.0, yaw in -3.0f64..3.0,
            tn in -100.0f64..100.0, te in -100.0f64..100.0, td in -50.0f64..0.0,
        ) {
            let uav = pose(n, e, d, yaw);
            let target = Vec3::new(tn, te, td);
            let r = (target - uav.position).rotate_z(-yaw);
            prop_assume!(r.norm() > 1e-3);
            let a = gimbal_point_at(&uav, target).unwrap();
            prop_assert!(!a.clamped);
            let (p, t) = (a.state.pan, a.state.tilt);
            let ray = Vec3::new(t.cos() * p.cos(), t.cos() * p.sin(), -t.sin());
            let u = r * (1.0 / r.norm());
            let dot = (ray.n * u.n + ray.e * u.e + ray.d * u.d).clamp(-1.0, 1.0);
            prop_assert!(dot.acos() < 1e-6, "angular error {}", dot.acos());
            prop_assert!(p > -PI && p <= PI);
        }

        #[test]
        fn stub_is_symmetric_under_swaps(dist in 10.0f64..150.0, ang in -0.7f64..0.7) {
            let obs = pose(0.0, 0.0, -10.0, 0.0);
            let a = (UavId::new(3).unwrap(), pose(dist * ang.cos(), dist * ang.sin(), -10.0, 0.0));
            let b = (UavId::new(9).unwrap(), pose(dist * ang.cos(), dist * ang.sin(), -10.0, 0.0));
            let det = GeometricDetector::default();
            let g = GimbalState::default();
            let x = run_detector(&det, &frame(1), &[a, b], &obs, &g);
            let y = run_detector(&det, &frame(1), &[b, a], &obs, &g);
            prop_assert_eq!(x.len(), 2);
            prop_assert_eq!(x[0].track_id, y[1].track_id);
            prop_assert_eq!((x[0].bearing, x[0].elevation), (y[0].bearing, y[0].elevation));
            prop_assert_eq!(run_detector(&det, &frame(1), &[a, b], &obs, &g), x);
        }
    }
}
