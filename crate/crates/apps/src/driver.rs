//! Runs a single host to quiescence in the calling thread.

use rsm_core::model::Envelope;
use rsm_core::runtime::{HostError, TransferOutcome};
use rsm_core::MachineHost;

/// Alternates handler steps and in-partition transfers until nothing is
/// left to do or `max_steps` steps ran. Returns what the machines sent to
/// the environment.
pub fn run_local(host: &MachineHost, max_steps: usize) -> Result<Vec<Envelope>, HostError> {
    let mut out = Vec::new();
    let mut steps = 0;
    while steps < max_steps {
        let runnable = host.runnable();
        let drainable = host.drainable();
        if runnable.is_empty() && drainable.is_empty() {
            break;
        }
        for id in &runnable {
            host.event_loop_step(id)?;
            steps += 1;
        }
        for id in &drainable {
            loop {
                steps += 1;
                match host.local_transfer_step(id)? {
                    TransferOutcome::Env(e) => out.push(e),
                    TransferOutcome::Idle | TransferOutcome::Blocked(_) => break,
                    _ => {}
                }
            }
        }
    }
    Ok(out)
}
