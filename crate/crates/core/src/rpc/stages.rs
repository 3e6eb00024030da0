//! Per-call stage accounting.
//!
//! Each RPC is timed on both sides: the device traverses init,
//! identify-and-copy, wait, and copy-back; the host traverses copy-in,
//! invoke, and copy-out-plus-notify, followed by the notification gap (the
//! time between the host setting the completion flag and the device
//! observing it). Records are exported as one JSON-lines object per call.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStages {
    pub init_ns: u64,
    pub identify_ns: u64,
    pub wait_ns: u64,
    pub copyback_ns: u64,
}

impl DeviceStages {
    pub fn total_ns(&self) -> u64 {
        self.init_ns + self.identify_ns + self.wait_ns + self.copyback_ns
    }

    pub fn fractions(&self) -> [f64; 4] {
        let total = self.total_ns().max(1) as f64;
        [
            self.init_ns as f64 / total,
            self.identify_ns as f64 / total,
            self.wait_ns as f64 / total,
            self.copyback_ns as f64 / total,
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostStages {
    pub copyin_ns: u64,
    pub invoke_ns: u64,
    pub copyout_notify_ns: u64,
    pub gap_ns: u64,
}

impl HostStages {
    pub fn total_ns(&self) -> u64 {
        self.copyin_ns + self.invoke_ns + self.copyout_notify_ns + self.gap_ns
    }

    pub fn fractions(&self) -> [f64; 4] {
        let total = self.total_ns().max(1) as f64;
        [
            self.copyin_ns as f64 / total,
            self.invoke_ns as f64 / total,
            self.copyout_notify_ns as f64 / total,
            self.gap_ns as f64 / total,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStageRecord {
    pub callee: u32,
    pub device: DeviceStages,
    pub host: HostStages,
}

struct HostPart {
    callee: u32,
    copyin_ns: u64,
    invoke_ns: u64,
    copyout_notify_ns: u64,
}

/// Pairs the host half of each call (recorded by the server when it
/// notifies) with the device half (recorded by the client after copy-back).
#[derive(Default)]
pub struct StageLog {
    pending: Mutex<HashMap<u64, HostPart>>,
    complete: Mutex<Vec<CallStageRecord>>,
}

impl StageLog {
    pub(crate) fn record_host(
        &self,
        serial: u64,
        callee: u32,
        copyin_ns: u64,
        invoke_ns: u64,
        copyout_notify_ns: u64,
    ) {
        self.pending.lock().unwrap().insert(
            serial,
            HostPart {
                callee,
                copyin_ns,
                invoke_ns,
                copyout_notify_ns,
            },
        );
    }

    pub(crate) fn record_device(&self, serial: u64, device: DeviceStages, gap_ns: u64) {
        let Some(host) = self.pending.lock().unwrap().remove(&serial) else {
            return;
        };
        self.complete.lock().unwrap().push(CallStageRecord {
            callee: host.callee,
            device,
            host: HostStages {
                copyin_ns: host.copyin_ns,
                invoke_ns: host.invoke_ns,
                copyout_notify_ns: host.copyout_notify_ns,
                gap_ns,
            },
        });
    }

    pub fn snapshot(&self) -> Vec<CallStageRecord> {
        self.complete.lock().unwrap().clone()
    }

    pub fn take(&self) -> Vec<CallStageRecord> {
        std::mem::take(&mut self.complete.lock().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions_sum_to_one() {
        let d = DeviceStages {
            init_ns: 10,
            identify_ns: 1000,
            wait_ns: 88031,
            copyback_ns: 42,
        };
        let sum: f64 = d.fractions().iter().sum();
        assert!((sum - 1.0).abs() < 1e-3);
    }

    #[test]
    fn json_record_field_names() {
        let rec = CallStageRecord {
            callee: 7,
            device: DeviceStages { init_ns: 1, identify_ns: 2, wait_ns: 3, copyback_ns: 4 },
            host: HostStages { copyin_ns: 5, invoke_ns: 6, copyout_notify_ns: 7, gap_ns: 8 },
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            line,
            "{\"callee\":7,\"device\":{\"init_ns\":1,\"identify_ns\":2,\"wait_ns\":3,\"copyback_ns\":4},\"host\":{\"copyin_ns\":5,\"invoke_ns\":6,\"copyout_notify_ns\":7,\"gap_ns\":8}}"
        );
        let back: CallStageRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }
}
