//! First-order kinematic multicopter and its offboard command surface.
//!
//! Position tracking is a speed-limited straight-line move toward the
//! setpoint, clamped independently in the horizontal plane and along the
//! down axis. Yaw turns along the shorter arc at a bounded rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{normalize_yaw, wrap_angle, ModelError, Pose, Vec3, Velocity};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VehicleError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl From<ModelError> for VehicleError {
    fn from(e: ModelError) -> Self {
        VehicleError::InvalidArgument(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("command rejected: {reason}")]
pub struct CommandRejected {
    pub reason: String,
}

impl CommandRejected {
    fn new(reason: &str) -> Self {
        CommandRejected { reason: reason.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub max_horizontal_speed_mps: f64,
    pub max_vertical_speed_mps: f64,
    pub max_yaw_rate_rps: f64,
    pub takeoff_altitude_m: f64,
    /// Altitude error under which a takeoff counts as complete.
    pub takeoff_tolerance_m: f64,
    /// Height above ground under which a landing counts as touchdown.
    pub land_tolerance_m: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            max_horizontal_speed_mps: 8.0,
            max_vertical_speed_mps: 2.0,
            max_yaw_rate_rps: 1.5,
            takeoff_altitude_m: 10.0,
            takeoff_tolerance_m: 0.5,
            land_tolerance_m: 0.2,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let fields = [
            ("max_horizontal_speed_mps", self.max_horizontal_speed_mps),
            ("max_vertical_speed_mps", self.max_vertical_speed_mps),
            ("max_yaw_rate_rps", self.max_yaw_rate_rps),
            ("takeoff_altitude_m", self.takeoff_altitude_m),
            ("takeoff_tolerance_m", self.takeoff_tolerance_m),
            ("land_tolerance_m", self.land_tolerance_m),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(VehicleError::InvalidArgument(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setpoint {
    pub position: Vec3,
    pub yaw: f64,
}

impl Setpoint {
    pub fn new(position: Vec3, yaw: f64) -> Result<Self, VehicleError> {
        if !position.is_finite() {
            return Err(VehicleError::InvalidArgument("setpoint position must be finite".into()));
        }
        Ok(Setpoint { position, yaw: normalize_yaw(yaw)? })
    }

    pub fn validate(&self) -> Result<(), VehicleError> {
        Setpoint::new(self.position, self.yaw).map(|_| ())
    }
}

/// A setpoint that moves with a constant feed-forward velocity from its
/// reference time, optionally with a tighter horizontal speed cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingSetpoint {
    pub setpoint: Setpoint,
    #[serde(default)]
    pub velocity: Velocity,
    #[serde(default)]
    pub ref_time_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_cap_mps: Option<f64>,
}

impl TrackingSetpoint {
    pub fn fixed(setpoint: Setpoint) -> Self {
        TrackingSetpoint { setpoint, velocity: Velocity::default(), ref_time_us: 0, speed_cap_mps: None }
    }

    pub fn validate(&self) -> Result<(), VehicleError> {
        self.setpoint.validate()?;
        if !self.velocity.0.is_finite() {
            return Err(VehicleError::InvalidArgument("feed-forward velocity must be finite".into()));
        }
        if let Some(c) = self.speed_cap_mps {
            if !(c.is_finite() && c > 0.0) {
                return Err(VehicleError::InvalidArgument(format!("speed cap must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    /// Setpoint position extrapolated to `t_us`.
    pub fn at(&self, t_us: u64) -> Setpoint {
        let dt = (t_us as f64 - self.ref_time_us as f64) / 1e6;
        Setpoint { position: self.setpoint.position + self.velocity.0 * dt, yaw: self.setpoint.yaw }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose,
    pub velocity: Velocity,
    pub armed: bool,
    pub airborne: bool,
}

impl VehicleState {
    pub fn on_ground(position: Vec3, yaw: f64) -> Self {
        VehicleState { pose: Pose { position, yaw: wrap_angle(yaw) }, velocity: Velocity::default(), armed: false, airborne: false }
    }

    pub fn is_consistent(&self) -> bool {
        (!self.airborne || self.armed) && (self.armed || self.velocity.0 == Vec3::ZERO) && self.pose.is_valid()
    }
}

fn clamp_len(v: f64, max: f64) -> f64 {
    v.clamp(-max, max)
}

/// Advances the kinematic model by `dt` seconds toward `setpoint`.
pub fn step_vehicle(
    state: &VehicleState,
    setpoint: Option<&Setpoint>,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState, VehicleError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(VehicleError::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    let mut next = *state;
    next.velocity = Velocity::default();
    let Some(sp) = setpoint.filter(|_| state.armed) else {
        return Ok(next);
    };

    let pos = state.pose.position;
    let (dn, de) = (sp.position.n - pos.n, sp.position.e - pos.e);
    let horizontal = dn.hypot(de);
    let reach = params.max_horizontal_speed_mps * dt;
    let scale = if horizontal > reach { reach / horizontal } else { 1.0 };
    let dd = clamp_len(sp.position.d - pos.d, params.max_vertical_speed_mps * dt);
    let delta = Vec3::new(dn * scale, de * scale, dd);

    let yaw_err = wrap_angle(sp.yaw - state.pose.yaw);
    let yaw_step = clamp_len(yaw_err, params.max_yaw_rate_rps * dt);

    next.pose = Pose { position: pos + delta, yaw: wrap_angle(state.pose.yaw + yaw_step) };
    next.velocity = Velocity(delta * (1.0 / dt));
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlightPhase {
    Ground,
    TakingOff,
    Flying,
    Landing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum VehicleCommand {
    Arm,
    Disarm,
    Takeoff,
    Land,
    SetSetpoint { setpoint: Setpoint },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehicleEvent {
    /// Takeoff altitude reached; the vehicle now accepts setpoints.
    Airborne,
    Touchdown,
}

/// A simulated vehicle: kinematic state plus the offboard safety rules.
#[derive(Debug, Clone)]
pub struct Vehicle {
    state: VehicleState,
    params: VehicleParams,
    phase: FlightPhase,
    launch: Vec3,
    target: Option<TrackingSetpoint>,
}

impl Vehicle {
    pub fn new(start: Vec3, yaw: f64, params: VehicleParams) -> Result<Self, VehicleError> {
        params.validate()?;
        let pose = Pose::new(start, yaw)?;
        Ok(Vehicle {
            state: VehicleState::on_ground(pose.position, pose.yaw),
            params,
            phase: FlightPhase::Ground,
            launch: start,
            target: None,
        })
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn phase(&self) -> FlightPhase {
        self.phase
    }

    pub fn launch_point(&self) -> Vec3 {
        self.launch
    }

    pub fn target(&self) -> Option<&TrackingSetpoint> {
        self.target.as_ref()
    }

    pub fn offboard_command(&mut self, cmd: VehicleCommand) -> Result<(), CommandRejected> {
        match cmd {
            VehicleCommand::Arm => {
                if self.phase != FlightPhase::Ground {
                    return Err(CommandRejected::new("airborne"));
                }
                if !self.state.armed {
                    self.state.armed = true;
                    self.launch = self.state.pose.position;
                }
                Ok(())
            }
            VehicleCommand::Disarm => {
                if self.phase != FlightPhase::Ground {
                    return Err(CommandRejected::new("airborne"));
                }
                self.state.armed = false;
                self.state.velocity = Velocity::default();
                self.target = None;
                Ok(())
            }
            VehicleCommand::Takeoff => {
                if !self.state.armed {
                    return Err(CommandRejected::new("not armed"));
                }
                if self.phase != FlightPhase::Ground {
                    return Err(CommandRejected::new("airborne"));
                }
                let p = self.state.pose.position;
                let sp = Setpoint { position: Vec3::new(p.n, p.e, -self.params.takeoff_altitude_m), yaw: self.state.pose.yaw };
                self.target = Some(TrackingSetpoint::fixed(sp));
                self.phase = FlightPhase::TakingOff;
                Ok(())
            }
            VehicleCommand::Land => {
                if self.phase == FlightPhase::Ground {
                    return Err(CommandRejected::new("not airborne"));
                }
                let p = self.state.pose.position;
                let sp = Setpoint { position: Vec3::new(p.n, p.e, 0.0), yaw: self.state.pose.yaw };
                self.target = Some(TrackingSetpoint::fixed(sp));
                self.phase = FlightPhase::Landing;
                Ok(())
            }
            VehicleCommand::SetSetpoint { setpoint } => self.track(TrackingSetpoint::fixed(setpoint)),
        }
    }

    /// Accepts a moving setpoint; same rules as `SetSetpoint`.
    pub fn track(&mut self, target: TrackingSetpoint) -> Result<(), CommandRejected> {
        if target.validate().is_err() {
            return Err(CommandRejected::new("invalid setpoint"));
        }
        if !self.state.airborne || self.phase != FlightPhase::Flying {
            return Err(CommandRejected::new("not airborne"));
        }
        self.target = Some(target);
        Ok(())
    }

    /// Stops at the current position.
    pub fn hold_position(&mut self) {
        if matches!(self.phase, FlightPhase::Flying | FlightPhase::TakingOff) {
            let p = self.state.pose.position;
            let d = if self.phase == FlightPhase::TakingOff { -self.params.takeoff_altitude_m } else { p.d };
            let sp = Setpoint { position: Vec3::new(p.n, p.e, d), yaw: self.state.pose.yaw };
            self.target = Some(TrackingSetpoint::fixed(sp));
        }
    }

    /// Flies back over the launch point at no less than takeoff altitude.
    pub fn return_to_launch(&mut self) {
        if matches!(self.phase, FlightPhase::Flying | FlightPhase::TakingOff) {
            let d = self.state.pose.position.d.min(-self.params.takeoff_altitude_m);
            let sp = Setpoint { position: Vec3::new(self.launch.n, self.launch.e, d), yaw: self.state.pose.yaw };
            self.target = Some(TrackingSetpoint::fixed(sp));
        }
    }

    pub fn horizontal_distance_to_launch(&self) -> f64 {
        (self.state.pose.position - self.launch).horizontal_norm()
    }

    /// Integrates one step ending at `t_end_us`.
    pub fn step(&mut self, dt: f64, t_end_us: u64) -> Result<Vec<VehicleEvent>, VehicleError> {
        let mut params = self.params;
        let sp = self.target.map(|t| {
            if let Some(cap) = t.speed_cap_mps {
                params.max_horizontal_speed_mps = params.max_horizontal_speed_mps.min(cap);
            }
            t.at(t_end_us)
        });
        self.state = step_vehicle(&self.state, sp.as_ref(), &params, dt)?;

        let mut events = Vec::new();
        match self.phase {
            FlightPhase::TakingOff => {
                let goal = -self.params.takeoff_altitude_m;
                if (self.state.pose.position.d - goal).abs() < self.params.takeoff_tolerance_m {
                    self.state.airborne = true;
                    self.phase = FlightPhase::Flying;
                    events.push(VehicleEvent::Airborne);
                }
            }
            FlightPhase::Landing => {
                if self.state.pose.position.d.abs() < self.params.land_tolerance_m {
                    self.state.airborne = false;
                    self.state.velocity = Velocity::default();
                    self.phase = FlightPhase::Ground;
                    self.target = None;
                    events.push(VehicleEvent::Touchdown);
                }
            }
            FlightPhase::Ground | FlightPhase::Flying => {}
        }
        Ok(events)
    }
}
