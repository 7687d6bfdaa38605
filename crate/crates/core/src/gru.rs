//! Gated recurrent units on the tape.
//!
//! Update gate z, reset gate r, candidate state h~:
//!   z  = sigmoid(x W_z + h U_z + b_z)
//!   r  = sigmoid(x W_r + h U_r + b_r)
//!   h~ = tanh(x W_c + (r * h) U_c + b_c)
//!   h' = (1 - z) * h + z * h~
//!
//! With all-zero weights and a zero initial state, every gate is constant
//! and h' stays exactly zero; tests rely on that fixed point.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::params::{uniform_init, ParameterStore, TapeBinding};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const GATE_NAMES: [&str; 3] = ["update", "reset", "cand"];

/// Tape-bound weights for one direction.
#[derive(Clone, Copy)]
pub struct GruVars {
    pub w: [Var; 3],
    pub u: [Var; 3],
    pub b: [Var; 3],
}

fn gate_names(prefix: &str, gate: &str) -> (String, String, String) {
    (
        format!("{prefix}.w_{gate}"),
        format!("{prefix}.u_{gate}"),
        format!("{prefix}.b_{gate}"),
    )
}

/// Registers the nine tensors of one GRU direction under `prefix`.
pub fn init_gru_params(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> Result<()> {
    let wb = 1.0 / crate::fmath::sqrt(input as f64);
    let ub = 1.0 / crate::fmath::sqrt(hidden as f64);
    for gate in GATE_NAMES {
        let (w, u, b) = gate_names(prefix, gate);
        store.insert(&w, uniform_init(rng, &[input, hidden], wb))?;
        store.insert(&u, uniform_init(rng, &[hidden, hidden], ub))?;
        store.insert(&b, Tensor::zeros([hidden]))?;
    }
    Ok(())
}

pub fn bind_gru(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParameterStore,
    prefix: &str,
) -> Result<GruVars> {
    let mut w = [Var(0); 3];
    let mut u = [Var(0); 3];
    let mut b = [Var(0); 3];
    for (i, gate) in GATE_NAMES.iter().enumerate() {
        let (wn, un, bn) = gate_names(prefix, gate);
        w[i] = binding.bind(tape, store, &wn)?;
        u[i] = binding.bind(tape, store, &un)?;
        b[i] = binding.bind(tape, store, &bn)?;
    }
    Ok(GruVars { w, u, b })
}

fn gate(tape: &mut Tape, p: &GruVars, i: usize, x: Var, h: Var) -> Result<Var> {
    let xw = tape.matmul(x, p.w[i])?;
    let hu = tape.matmul(h, p.u[i])?;
    let s = tape.add(xw, hu)?;
    tape.add(s, p.b[i])
}

/// One recurrence step: `x` is `[input]`, `h` is `[hidden]`, `ones` is a
/// `[hidden]` tensor of ones shared across the sequence.
pub fn gru_step(tape: &mut Tape, p: &GruVars, x: Var, h: Var, ones: Var) -> Result<Var> {
    let z_pre = gate(tape, p, 0, x, h)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, p, 1, x, h)?;
    let r = tape.sigmoid(r_pre)?;

    let rh = tape.mul(r, h)?;
    let xw = tape.matmul(x, p.w[2])?;
    let ru = tape.matmul(rh, p.u[2])?;
    let c_pre0 = tape.add(xw, ru)?;
    let c_pre = tape.add(c_pre0, p.b[2])?;
    let c = tape.tanh(c_pre)?;

    let keep = tape.sub(ones, z)?;
    let kept = tape.mul(keep, h)?;
    let new = tape.mul(z, c)?;
    tape.add(kept, new)
}

/// Runs the recurrence from a zero state and returns every hidden state.
pub fn gru_states(tape: &mut Tape, p: &GruVars, xs: &[Var], hidden: usize) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(CoreError::Input("gru over an empty sequence".into()));
    }
    let ones = tape.leaf(Tensor::ones([hidden]))?;
    let mut h = tape.leaf(Tensor::zeros([hidden]))?;
    let mut states = Vec::with_capacity(xs.len());
    for &x in xs {
        h = gru_step(tape, p, x, h, ones)?;
        states.push(h);
    }
    Ok(states)
}

pub struct BiGruVars {
    pub fwd: GruVars,
    pub bwd: GruVars,
}

pub fn init_bigru_params(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    prefix: &str,
    input: usize,
    hidden_per_dir: usize,
) -> Result<()> {
    init_gru_params(store, rng, &format!("{prefix}.fwd"), input, hidden_per_dir)?;
    init_gru_params(store, rng, &format!("{prefix}.bwd"), input, hidden_per_dir)
}

pub fn bind_bigru(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParameterStore,
    prefix: &str,
) -> Result<BiGruVars> {
    Ok(BiGruVars {
        fwd: bind_gru(tape, binding, store, &format!("{prefix}.fwd"))?,
        bwd: bind_gru(tape, binding, store, &format!("{prefix}.bwd"))?,
    })
}

/// Many-to-many: per step, forward and backward states concatenated into one
/// row of width `2 * hidden_per_dir`, aligned to the input order.
pub fn bigru_rows(
    tape: &mut Tape,
    p: &BiGruVars,
    xs: &[Var],
    hidden_per_dir: usize,
) -> Result<Vec<Var>> {
    let fwd = gru_states(tape, &p.fwd, xs, hidden_per_dir)?;
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let mut bwd = gru_states(tape, &p.bwd, &rev, hidden_per_dir)?;
    bwd.reverse();
    fwd.iter()
        .zip(bwd.iter())
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect()
}

/// Many-to-one: final forward state next to final backward state.
pub fn bigru_final(
    tape: &mut Tape,
    p: &BiGruVars,
    xs: &[Var],
    hidden_per_dir: usize,
) -> Result<Var> {
    let fwd = gru_states(tape, &p.fwd, xs, hidden_per_dir)?;
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let bwd = gru_states(tape, &p.bwd, &rev, hidden_per_dir)?;
    let f_last = *fwd.last().expect("non-empty checked");
    let b_last = *bwd.last().expect("non-empty checked");
    tape.concat(&[f_last, b_last])
}
