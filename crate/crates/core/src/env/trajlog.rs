//! Binary per-episode trajectory logs and the offline success recount.

use std::fs;
use std::path::Path;

use super::dynamics::{advance_hold, reached_now, EnvParams, EnvState, StepResult, SuccessThresholds};
use super::objects::ObjectSpec;
use super::quat::{angle_unchecked, Quat};
use super::EnvError;
use crate::policy::dims::NUM_JOINTS;

#[derive(Clone, Debug, PartialEq)]
pub struct LoggedStep {
    pub step: u64,
    pub q: [f64; NUM_JOINTS],
    pub rho: Quat,
    /// Goal in force when the success check ran.
    pub goal: Quat,
    pub joint_vel: [f64; NUM_JOINTS],
    pub v: [f64; 3],
    pub omega: [f64; 3],
    pub reward: f64,
    pub reached_now: bool,
    pub registered: bool,
    pub dropped: bool,
}

impl LoggedStep {
    pub fn capture(next: &EnvState, r: &StepResult) -> Self {
        Self {
            step: next.t as u64,
            q: next.q,
            rho: next.rho,
            goal: r.checked_goal,
            joint_vel: next.joint_vel,
            v: next.v,
            omega: next.omega,
            reward: r.reward.total,
            reached_now: r.reached_now,
            registered: r.reached,
            dropped: r.dropped,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog {
    pub object_id: u64,
    pub category: u64,
    pub thresholds: SuccessThresholds,
    pub hold_window: u64,
    /// Success count reported by the environment at episode end.
    pub online_successes: u32,
    pub steps: Vec<LoggedStep>,
}

impl TrajectoryLog {
    pub fn new(obj: &ObjectSpec, params: &EnvParams) -> Self {
        Self {
            object_id: obj.id as u64,
            category: obj.category as u64,
            thresholds: params.thresholds,
            hold_window: params.hold_window as u64,
            online_successes: 0,
            steps: Vec::new(),
        }
    }
}

/// Recomputes the success count from logged poses and velocities alone.
pub fn recount(log: &TrajectoryLog) -> u32 {
    let mut counter = 0usize;
    let mut count = 0;
    for s in &log.steps {
        let now = reached_now(angle_unchecked(s.rho, s.goal), &s.joint_vel, &s.v, &s.omega, &log.thresholds);
        if advance_hold(&mut counter, now, log.hold_window as usize) {
            count += 1;
        }
    }
    count
}

const TRAJ_MAGIC: &[u8; 8] = b"DXMTRJ\0\0";
const TRAJ_VERSION: u32 = 1;
const STEP_F64S: usize = NUM_JOINTS + 4 + 4 + NUM_JOINTS + 3 + 3 + 1;
const STEP_BYTES: usize = 8 + STEP_F64S * 8 + 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<&[u8], EnvError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(EnvError::Format { what: "trajectory log", detail: "truncated".into() });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64, EnvError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, EnvError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, EnvError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn array<const N: usize>(&mut self) -> Result<[f64; N], EnvError> {
        let mut a = [0.0; N];
        for v in &mut a {
            *v = self.f64()?;
        }
        Ok(a)
    }
}

/// Writes one or more episode logs to a single file.
pub fn write_trajectory_log(path: &Path, logs: &[TrajectoryLog]) -> Result<(), EnvError> {
    let mut b = Vec::new();
    b.extend_from_slice(TRAJ_MAGIC);
    b.extend(TRAJ_VERSION.to_le_bytes());
    b.extend((logs.len() as u64).to_le_bytes());
    for log in logs {
        b.extend(log.object_id.to_le_bytes());
        b.extend(log.category.to_le_bytes());
        let th = &log.thresholds;
        for v in [th.tau_theta, th.tau_q, th.tau_v, th.tau_omega] {
            b.extend(v.to_le_bytes());
        }
        b.extend(log.hold_window.to_le_bytes());
        b.extend(log.online_successes.to_le_bytes());
        b.extend((log.steps.len() as u64).to_le_bytes());
        for s in &log.steps {
            b.extend(s.step.to_le_bytes());
            let (rho, goal) = (s.rho.to_array(), s.goal.to_array());
            let vals = s
                .q
                .iter()
                .chain(&rho)
                .chain(&goal)
                .chain(&s.joint_vel)
                .chain(&s.v)
                .chain(&s.omega)
                .chain(std::iter::once(&s.reward));
            for v in vals {
                b.extend(v.to_le_bytes());
            }
            b.push(s.reached_now as u8 | (s.registered as u8) << 1 | (s.dropped as u8) << 2);
        }
    }
    crate::io::write_atomic(path, &b)?;
    Ok(())
}

pub fn read_trajectory_log(path: &Path) -> Result<Vec<TrajectoryLog>, EnvError> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.bytes(8)? != TRAJ_MAGIC {
        return Err(EnvError::Format { what: "trajectory log", detail: "bad magic".into() });
    }
    let version = r.u32()?;
    if version != TRAJ_VERSION {
        return Err(EnvError::Format { what: "trajectory log", detail: format!("unsupported version {version}") });
    }
    let n = r.u64()?;
    let mut logs = Vec::new();
    for _ in 0..n {
        let object_id = r.u64()?;
        let category = r.u64()?;
        let [tau_theta, tau_q, tau_v, tau_omega] = r.array::<4>()?;
        let hold_window = r.u64()?;
        let online_successes = r.u32()?;
        let steps_n = r.u64()? as usize;
        if r.buf.len() - r.pos < steps_n.saturating_mul(STEP_BYTES) {
            return Err(EnvError::Format { what: "trajectory log", detail: "truncated".into() });
        }
        let mut steps = Vec::with_capacity(steps_n);
        for _ in 0..steps_n {
            let step = r.u64()?;
            let q = r.array::<NUM_JOINTS>()?;
            let rho = Quat::from_array(r.array::<4>()?);
            let goal = Quat::from_array(r.array::<4>()?);
            let joint_vel = r.array::<NUM_JOINTS>()?;
            let v = r.array::<3>()?;
            let omega = r.array::<3>()?;
            let reward = r.f64()?;
            let flags = r.bytes(1)?[0];
            steps.push(LoggedStep {
                step,
                q,
                rho,
                goal,
                joint_vel,
                v,
                omega,
                reward,
                reached_now: flags & 1 != 0,
                registered: flags & 2 != 0,
                dropped: flags & 4 != 0,
            });
        }
        logs.push(TrajectoryLog {
            object_id,
            category,
            thresholds: SuccessThresholds { tau_theta, tau_q, tau_v, tau_omega },
            hold_window,
            online_successes,
            steps,
        });
    }
    if r.pos != buf.len() {
        return Err(EnvError::Format { what: "trajectory log", detail: "trailing bytes".into() });
    }
    Ok(logs)
}
