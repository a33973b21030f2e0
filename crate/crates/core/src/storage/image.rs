use std::collections::{BTreeMap, VecDeque};

use super::log::{LogOp, LogRecord, OpCode};

/// The committed contents of a store: every reliable queue and reliable map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StoreImage {
    pub queues: BTreeMap<String, VecDeque<Vec<u8>>>,
    pub maps: BTreeMap<String, BTreeMap<Vec<u8>, Vec<u8>>>,
}

impl StoreImage {
    pub fn apply_record(&mut self, record: &LogRecord) -> Result<(), String> {
        for op in &record.ops {
            self.apply(op)?;
        }
        Ok(())
    }

    pub fn apply(&mut self, op: &LogOp) -> Result<(), String> {
        let name = &op.collection;
        match op.code {
            OpCode::CreateQueue => {
                self.queues.entry(name.clone()).or_default();
            }
            OpCode::Enqueue => self
                .queues
                .get_mut(name)
                .ok_or_else(|| format!("enqueue to unknown queue `{name}`"))?
                .push_back(op.value.clone()),
            OpCode::Dequeue => {
                self.queues
                    .get_mut(name)
                    .ok_or_else(|| format!("dequeue from unknown queue `{name}`"))?
                    .pop_front()
                    .ok_or_else(|| format!("dequeue from empty queue `{name}`"))?;
            }
            OpCode::DropQueue => {
                self.queues.remove(name);
            }
            OpCode::MapSet => {
                self.maps
                    .entry(name.clone())
                    .or_default()
                    .insert(op.key.clone(), op.value.clone());
            }
            OpCode::MapRemove => {
                if let Some(m) = self.maps.get_mut(name) {
                    m.remove(&op.key);
                }
            }
            OpCode::DropMap => {
                self.maps.remove(name);
            }
        }
        Ok(())
    }

    /// Ops that rebuild this image from empty; used for snapshots.
    pub fn to_ops(&self) -> Vec<LogOp> {
        let mut ops = Vec::new();
        for (name, items) in &self.queues {
            ops.push(LogOp::new(name, OpCode::CreateQueue, vec![], vec![]));
            for item in items {
                ops.push(LogOp::new(name, OpCode::Enqueue, vec![], item.clone()));
            }
        }
        for (name, entries) in &self.maps {
            for (k, v) in entries {
                ops.push(LogOp::new(name, OpCode::MapSet, k.clone(), v.clone()));
            }
        }
        ops
    }

    pub fn queue(&self, name: &str) -> Option<&VecDeque<Vec<u8>>> {
        self.queues.get(name)
    }

    pub fn map(&self, name: &str) -> Option<&BTreeMap<Vec<u8>, Vec<u8>>> {
        self.maps.get(name)
    }
}
