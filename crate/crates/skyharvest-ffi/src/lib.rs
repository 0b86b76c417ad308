//! C ABI over the harvesting environment so other languages can drive
//! episodes: opaque handles, integer status codes, caller-provided
//! buffers. The generated header lives in `include/skyharvest.h`.
//!
//! Every function returning [`ShStatus`] stores a message retrievable
//! with [`sh_last_error_message`] on failure. Handles are not thread
//! safe; drive each environment from one thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use skyharvest::config::Experiment;
use skyharvest::env::{Action, Env, NUM_ACTIONS};

/// Status codes returned by every fallible call.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = -1,
    /// An argument was out of range (agent index, buffer size, action).
    InvalidArgument = -2,
    /// The config or map failed validation.
    InvalidConfig = -3,
    /// The episode is over or has not been reset.
    BadState = -4,
    /// Internal failure; see the error message.
    Internal = -5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg.replace('\0', "?")).unwrap();
    });
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sh_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn sh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// An opaque simulator handle.
pub struct ShEnv {
    env: Env,
    observations: Vec<Vec<f64>>,
    global_state: Vec<f64>,
    started: bool,
    episode_done: bool,
}

/// Build an environment from an experiment config file (JSON, same
/// format as the CLI). Returns null on failure; see
/// [`sh_last_error_message`].
///
/// # Safety
/// `config_path` must be a valid NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn sh_env_new(config_path: *const c_char, seed: u64) -> *mut ShEnv {
    if config_path.is_null() {
        set_error("config_path is null");
        return std::ptr::null_mut();
    }
    let path = match CStr::from_ptr(config_path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("config_path is not valid UTF-8");
            return std::ptr::null_mut();
        }
    };
    let exp = match Experiment::load(Path::new(path)) {
        Ok(e) => e,
        Err(e) => {
            set_error(e.to_string());
            return std::ptr::null_mut();
        }
    };
    match Env::new(exp.env_cfg, seed) {
        Ok(env) => Box::into_raw(Box::new(ShEnv {
            env,
            observations: Vec::new(),
            global_state: Vec::new(),
            started: false,
            episode_done: false,
        })),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Destroy a handle. Null is ignored.
///
/// # Safety
/// `handle` must come from [`sh_env_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sh_env_free(handle: *mut ShEnv) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

macro_rules! deref_or {
    ($ptr:expr, $ret:expr) => {
        match $ptr.as_ref() {
            Some(h) => h,
            None => {
                set_error("handle is null");
                return $ret;
            }
        }
    };
}

macro_rules! deref_mut_or {
    ($ptr:expr, $ret:expr) => {
        match $ptr.as_mut() {
            Some(h) => h,
            None => {
                set_error("handle is null");
                return $ret;
            }
        }
    };
}

/// Number of UAV agents.
///
/// # Safety
/// `handle` must be a live handle from [`sh_env_new`].
#[no_mangle]
pub unsafe extern "C" fn sh_env_num_agents(handle: *const ShEnv) -> i32 {
    let h = deref_or!(handle, -1);
    h.env.num_agents() as i32
}

/// Number of ground devices.
///
/// # Safety
/// `handle` must be a live handle from [`sh_env_new`].
#[no_mangle]
pub unsafe extern "C" fn sh_env_num_devices(handle: *const ShEnv) -> i32 {
    let h = deref_or!(handle, -1);
    h.env.num_devices() as i32
}

/// Length of one agent's observation vector.
///
/// # Safety
/// `handle` must be a live handle from [`sh_env_new`].
#[no_mangle]
pub unsafe extern "C" fn sh_env_obs_len(handle: *const ShEnv) -> i32 {
    let h = deref_or!(handle, -1);
    h.env.obs_len() as i32
}

/// Length of the global state vector.
///
/// # Safety
/// `handle` must be a live handle from [`sh_env_new`].
#[no_mangle]
pub unsafe extern "C" fn sh_env_state_len(handle: *const ShEnv) -> i32 {
    let h = deref_or!(handle, -1);
    h.env.state_len() as i32
}

/// Number of actions in the action space (always 6: hover, north, west,
/// south, east, no-op).
#[no_mangle]
pub extern "C" fn sh_num_actions() -> i32 {
    NUM_ACTIONS as i32
}

/// Start a fresh episode.
///
/// # Safety
/// `handle` must be a live handle from [`sh_env_new`].
#[no_mangle]
pub unsafe extern "C" fn sh_env_reset(handle: *mut ShEnv) -> ShStatus {
    let h = deref_mut_or!(handle, ShStatus::NullPointer);
    let outcome = h.env.reset();
    h.observations = outcome.observations;
    h.global_state = outcome.global_state;
    h.started = true;
    h.episode_done = false;
    ShStatus::Ok
}

/// Feasibility flags for one agent, in action order, written to `out6`
/// (six bytes, 0/1).
///
/// # Safety
/// `handle` must be live; `out6` must point to six writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sh_env_feasible_mask(
    handle: *const ShEnv,
    agent: i32,
    out6: *mut u8,
) -> ShStatus {
    let h = deref_or!(handle, ShStatus::NullPointer);
    if out6.is_null() {
        set_error("out6 is null");
        return ShStatus::NullPointer;
    }
    if agent < 0 || agent as usize >= h.env.num_agents() {
        set_error(format!("agent {agent} out of range"));
        return ShStatus::InvalidArgument;
    }
    if !h.started {
        set_error("environment not reset");
        return ShStatus::BadState;
    }
    let mask = h.env.feasible_mask(agent as usize);
    for (i, &m) in mask.iter().enumerate() {
        *out6.add(i) = m as u8;
    }
    ShStatus::Ok
}

unsafe fn copy_vec(src: &[f64], buf: *mut f64, len: usize) -> ShStatus {
    if buf.is_null() {
        set_error("buffer is null");
        return ShStatus::NullPointer;
    }
    if len != src.len() {
        set_error(format!("buffer length {len} does not match {}", src.len()));
        return ShStatus::InvalidArgument;
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), buf, len);
    ShStatus::Ok
}

/// Copy one agent's current observation into `buf` (length must equal
/// [`sh_env_obs_len`]).
///
/// # Safety
/// `handle` must be live; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sh_env_observation(
    handle: *const ShEnv,
    agent: i32,
    buf: *mut f64,
    len: usize,
) -> ShStatus {
    let h = deref_or!(handle, ShStatus::NullPointer);
    if !h.started {
        set_error("environment not reset");
        return ShStatus::BadState;
    }
    if agent < 0 || agent as usize >= h.env.num_agents() {
        set_error(format!("agent {agent} out of range"));
        return ShStatus::InvalidArgument;
    }
    copy_vec(&h.observations[agent as usize], buf, len)
}

/// Copy the centralized-training state into `buf` (length must equal
/// [`sh_env_state_len`]).
///
/// # Safety
/// `handle` must be live; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sh_env_global_state(
    handle: *const ShEnv,
    buf: *mut f64,
    len: usize,
) -> ShStatus {
    let h = deref_or!(handle, ShStatus::NullPointer);
    if !h.started {
        set_error("environment not reset");
        return ShStatus::BadState;
    }
    copy_vec(&h.global_state, buf, len)
}

/// Advance one time slot. `actions` holds one action index per agent
/// (see [`sh_num_actions`]); each must be feasible for its agent.
/// `reward_out` and `done_out` may be null when not needed.
///
/// # Safety
/// `handle` must be live; `actions` must point to `n_actions` ints.
#[no_mangle]
pub unsafe extern "C" fn sh_env_step(
    handle: *mut ShEnv,
    actions: *const i32,
    n_actions: usize,
    reward_out: *mut f64,
    done_out: *mut i32,
) -> ShStatus {
    let h = deref_mut_or!(handle, ShStatus::NullPointer);
    if actions.is_null() {
        set_error("actions is null");
        return ShStatus::NullPointer;
    }
    if !h.started {
        set_error("environment not reset");
        return ShStatus::BadState;
    }
    if h.episode_done {
        set_error("episode is over; reset first");
        return ShStatus::BadState;
    }
    if n_actions != h.env.num_agents() {
        set_error(format!(
            "got {n_actions} actions for {} agents",
            h.env.num_agents()
        ));
        return ShStatus::InvalidArgument;
    }
    let mut joint = Vec::with_capacity(n_actions);
    for i in 0..n_actions {
        let a = *actions.add(i);
        if a < 0 || a as usize >= NUM_ACTIONS {
            set_error(format!("action index {a} out of range"));
            return ShStatus::InvalidArgument;
        }
        let action = Action::from_index(a as usize);
        if !h.env.feasible_mask(i)[a as usize] {
            set_error(format!("action {action:?} infeasible for agent {i}"));
            return ShStatus::InvalidArgument;
        }
        joint.push(action);
    }
    let outcome = h.env.step(&joint);
    h.observations = outcome.observations;
    h.global_state = outcome.global_state;
    h.episode_done = outcome.episode_done;
    if !reward_out.is_null() {
        *reward_out = outcome.reward;
    }
    if !done_out.is_null() {
        *done_out = outcome.episode_done as i32;
    }
    ShStatus::Ok
}

/// Fraction of the initial device data collected so far this episode.
///
/// # Safety
/// `handle` must be a live handle from [`sh_env_new`].
#[no_mangle]
pub unsafe extern "C" fn sh_env_collection_ratio(handle: *const ShEnv) -> f64 {
    match handle.as_ref() {
        Some(h) => h.env.collection_ratio(),
        None => f64::NAN,
    }
}
