//! The execution engine: device and operation tables, plugin
//! registration, priority dispatch, per-node DFG execution, and the
//! backend-profile hot swap.
//!
//! Devices split into shell and user logic. Shell devices (the "CPU"
//! registered at construction) survive reprogramming; `program()`
//! atomically replaces every user-logic device and kernel with the
//! contents of a profile bundle.

pub mod builtins;
pub mod bundle;
pub mod plugin;
pub mod value;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::batchprep::BatchPrepError;
use crate::dfg::{DataflowGraph, DfgError};
use crate::graphstore::{GraphStore, TAG_BATCH_GET};
use crate::kernels::{DeviceProfile, KernelError, Schedule};

use bundle::ProfileBundle;
use plugin::{LoadedLibrary, StaticPlugin};
use value::Value;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("device or operation name must not be empty")]
    EmptyName,
    #[error("unknown operation {0:?}")]
    UnknownOp(String),
    #[error("operation {op:?} has no kernel on a live device (orphans: {orphans:?})")]
    NoLiveDevice { op: String, orphans: Vec<String> },
    #[error("input {0:?} missing from the feed")]
    MissingInput(String),
    #[error("node {seq} ({op}): {source}")]
    NodeFailed {
        seq: u32,
        op: String,
        #[source]
        source: Box<RunnerError>,
    },
    #[error("value error: {0}")]
    BadValue(String),
    #[error("no graph store bound to this runner")]
    NoStore,
    #[error("reprogramming is not allowed while a DFG is executing")]
    ProgramDuringExecution,
    #[error("plugin load failed: {0}")]
    PluginLoad(String),
    #[error("plugin does not expose entry point {0:?}")]
    MissingEntryPoint(String),
    #[error("plugin init returned nonzero status {0}")]
    PluginInitFailed(i32),
    #[error("unknown static plugin {0:?}")]
    UnknownStaticPlugin(String),
    #[error("bundle line {line}: {msg}")]
    BundleParse { line: usize, msg: String },
    #[error("bundle references unknown builtin kernel {0:?}")]
    UnknownKernelId(String),
    #[error("bundle binds to unknown device {0:?}")]
    UnknownDevice(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    BatchPrep(#[from] BatchPrepError),
    #[error(transparent)]
    Dfg(#[from] DfgError),
}

pub type Result<T> = std::result::Result<T, RunnerError>;

/// One device-specific implementation of a C-operation.
pub trait Kernel: Send + Sync {
    fn call(&self, ctx: &ExecCtx<'_>, inputs: &[Value]) -> Result<Vec<Value>>;
}

/// Call-time context handed to kernels: the winning device's profile
/// and the store, when one is bound.
pub struct ExecCtx<'a> {
    pub profile: &'a DeviceProfile,
    pub store: Option<&'a GraphStore>,
}

impl ExecCtx<'_> {
    pub fn schedule(&self) -> Schedule {
        self.profile.schedule()
    }
}

#[derive(Clone)]
struct DeviceEntry {
    profile: DeviceProfile,
    shell: bool,
}

#[derive(Clone)]
struct OpEntry {
    device: String,
    kernel: Arc<dyn Kernel>,
    reg_seq: u64,
}

#[derive(Default)]
struct Registry {
    devices: IndexMap<String, DeviceEntry>,
    ops: HashMap<String, Vec<OpEntry>>,
    reg_counter: u64,
}

impl Registry {
    fn register_device(&mut self, profile: DeviceProfile, shell: bool) -> Result<()> {
        if profile.name.is_empty() {
            return Err(RunnerError::EmptyName);
        }
        match self.devices.get_mut(&profile.name) {
            // Re-registration overwrites the priority and params but
            // keeps the shell marking.
            Some(existing) => existing.profile = profile,
            None => {
                self.devices
                    .insert(profile.name.clone(), DeviceEntry { profile, shell });
            }
        }
        Ok(())
    }

    fn register_op(&mut self, op: &str, device: &str, kernel: Arc<dyn Kernel>) -> Result<()> {
        if op.is_empty() || device.is_empty() {
            return Err(RunnerError::EmptyName);
        }
        self.reg_counter += 1;
        let reg_seq = self.reg_counter;
        let entries = self.ops.entry(op.to_string()).or_default();
        match entries.iter_mut().find(|e| e.device == device) {
            // Same (op, device) replaces in place and counts as the most
            // recent registration.
            Some(entry) => {
                entry.kernel = kernel;
                entry.reg_seq = reg_seq;
            }
            None => entries.push(OpEntry {
                device: device.to_string(),
                kernel,
                reg_seq,
            }),
        }
        Ok(())
    }

    fn dispatch(&self, op: &str) -> Result<(DeviceProfile, Arc<dyn Kernel>)> {
        let entries = self
            .ops
            .get(op)
            .ok_or_else(|| RunnerError::UnknownOp(op.to_string()))?;
        let winner = entries
            .iter()
            .filter_map(|e| {
                self.devices
                    .get(&e.device)
                    .map(|d| (d.profile.priority, e.reg_seq, e, d))
            })
            .max_by_key(|(priority, reg_seq, _, _)| (*priority, *reg_seq));
        match winner {
            Some((_, _, entry, device)) => Ok((device.profile.clone(), entry.kernel.clone())),
            None => Err(RunnerError::NoLiveDevice {
                op: op.to_string(),
                orphans: entries.iter().map(|e| e.device.clone()).collect(),
            }),
        }
    }

    fn drop_user_logic(&mut self) {
        let user: Vec<String> = self
            .devices
            .iter()
            .filter(|(_, d)| !d.shell)
            .map(|(name, _)| name.clone())
            .collect();
        self.devices.retain(|_, d| d.shell);
        for entries in self.ops.values_mut() {
            entries.retain(|e| !user.contains(&e.device));
        }
        self.ops.retain(|_, entries| !entries.is_empty());
    }
}

/// Where a dispatch decision landed; one entry per executed node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub seq: u32,
    pub op: String,
    pub device: String,
}

/// Everything `execute` produces besides the output values.
pub struct ExecutionReport {
    pub outputs: HashMap<String, Value>,
    pub trace: Vec<TraceEntry>,
    pub batch_prep_ns: u64,
    pub infer_ns: u64,
    pub batch_io_pages: u64,
}

/// The engine. All registry mutations are mutually exclusive with
/// execution; `program()` refuses to run mid-execution instead of
/// blocking.
pub struct Runner {
    registry: RwLock<Registry>,
    store: Option<Arc<GraphStore>>,
    static_plugins: Mutex<HashMap<String, StaticPlugin>>,
    loaded_libs: Mutex<Vec<LoadedLibrary>>,
}

/// Table-3 shell and default user-logic devices.
pub const SHELL_DEVICE: &str = "CPU";
pub const SHELL_PRIORITY: i64 = 50;
pub const VECTOR_DEVICE: &str = "Vector processor";
pub const VECTOR_PRIORITY: i64 = 150;
pub const SYSTOLIC_DEVICE: &str = "Systolic array";
pub const SYSTOLIC_PRIORITY: i64 = 300;

impl Runner {
    /// A runner with only the shell CPU registered and every built-in
    /// operation bound to it.
    pub fn shell_only(store: Option<Arc<GraphStore>>) -> Self {
        let mut registry = Registry::default();
        registry
            .register_device(DeviceProfile::new(SHELL_DEVICE, SHELL_PRIORITY), true)
            .expect("shell device");
        for (op, kernel_id) in builtins::DEFAULT_OP_BINDINGS {
            let kernel = builtins::builtin_kernel(kernel_id).expect("builtin id");
            registry.register_op(op, SHELL_DEVICE, kernel).expect("op");
        }
        Self {
            registry: RwLock::new(registry),
            store,
            static_plugins: Mutex::new(HashMap::new()),
            loaded_libs: Mutex::new(Vec::new()),
        }
    }

    /// The default configuration: shell CPU plus the heterogeneous
    /// user-logic pair (lane-blocked vector processor, 8x8 tile systolic
    /// array) with the compute kernels bound to them.
    pub fn with_default_devices(store: Option<Arc<GraphStore>>) -> Self {
        let runner = Self::shell_only(store);
        {
            let mut reg = runner.registry.write();
            reg.register_device(
                DeviceProfile::new(VECTOR_DEVICE, VECTOR_PRIORITY).with_param("lanes", 4),
                false,
            )
            .expect("vector device");
            reg.register_device(
                DeviceProfile::new(SYSTOLIC_DEVICE, SYSTOLIC_PRIORITY).with_param("tile", 8),
                false,
            )
            .expect("systolic device");
            for (op, kernel_id) in builtins::DEFAULT_OP_BINDINGS {
                if matches!(*op, "BatchPre") {
                    continue;
                }
                let kernel = builtins::builtin_kernel(kernel_id).expect("builtin id");
                reg.register_op(op, VECTOR_DEVICE, kernel.clone()).expect("op");
                if matches!(*op, "GEMM" | "SpMM_Mean" | "SpMM_Sum" | "SpMM_Ngcf" | "SDDMM") {
                    reg.register_op(op, SYSTOLIC_DEVICE, kernel).expect("op");
                }
            }
        }
        runner
    }

    pub fn store(&self) -> Option<&Arc<GraphStore>> {
        self.store.as_ref()
    }

    pub fn register_device(&self, name: &str, priority: i64) -> Result<()> {
        self.registry
            .write()
            .register_device(DeviceProfile::new(name, priority), false)
    }

    pub fn register_device_profile(&self, profile: DeviceProfile) -> Result<()> {
        self.registry.write().register_device(profile, false)
    }

    pub fn register_op_definition(
        &self,
        op: &str,
        device: &str,
        kernel: Arc<dyn Kernel>,
    ) -> Result<()> {
        self.registry.write().register_op(op, device, kernel)
    }

    /// The entry with the highest-priority live device; ties go to the
    /// most recent registration.
    pub fn dispatch(&self, op: &str) -> Result<(DeviceProfile, Arc<dyn Kernel>)> {
        self.registry.read().dispatch(op)
    }

    pub fn dispatch_device(&self, op: &str) -> Result<String> {
        Ok(self.dispatch(op)?.0.name)
    }

    pub fn device_table(&self) -> Vec<(String, i64)> {
        self.registry
            .read()
            .devices
            .iter()
            .map(|(name, d)| (name.clone(), d.profile.priority))
            .collect()
    }

    pub fn op_table(&self) -> Vec<(String, Vec<String>)> {
        let reg = self.registry.read();
        let mut out: Vec<(String, Vec<String>)> = reg
            .ops
            .iter()
            .map(|(op, entries)| {
                (
                    op.clone(),
                    entries.iter().map(|e| e.device.clone()).collect(),
                )
            })
            .collect();
        out.sort();
        out
    }

    /// Evaluates the DFG in topological order, dispatching each node by
    /// priority. Time spent in nodes that touch batch pages counts as
    /// batch preprocessing; everything else is inference.
    pub fn execute(
        &self,
        graph: &DataflowGraph,
        inputs: HashMap<String, Value>,
    ) -> Result<ExecutionReport> {
        graph.validate()?;
        // Holding the read guard for the whole run keeps program() out.
        let registry = self.registry.read();

        for name in &graph.inputs {
            if !inputs.contains_key(name) {
                return Err(RunnerError::MissingInput(name.clone()));
            }
        }

        let mut env: HashMap<String, Value> = inputs;
        let mut trace = Vec::with_capacity(graph.nodes.len());
        let mut batch_prep_ns = 0u64;
        let mut infer_ns = 0u64;
        let mut batch_io_pages = 0u64;

        for node in &graph.nodes {
            let (profile, kernel) =
                registry.dispatch(&node.op).map_err(|e| RunnerError::NodeFailed {
                    seq: node.seq,
                    op: node.op.clone(),
                    source: Box::new(e),
                })?;
            let args: Vec<Value> = node
                .inputs
                .iter()
                .map(|label| {
                    env.get(label).cloned().ok_or_else(|| RunnerError::NodeFailed {
                        seq: node.seq,
                        op: node.op.clone(),
                        source: Box::new(RunnerError::MissingInput(label.clone())),
                    })
                })
                .collect::<Result<_>>()?;

            let pages_before = self.batch_pages_read();
            let started = Instant::now();
            let ctx = ExecCtx {
                profile: &profile,
                store: self.store.as_deref(),
            };
            let outputs = kernel
                .call(&ctx, &args)
                .map_err(|e| RunnerError::NodeFailed {
                    seq: node.seq,
                    op: node.op.clone(),
                    source: Box::new(e),
                })?;
            let elapsed = started.elapsed().as_nanos() as u64;
            let pages = self.batch_pages_read() - pages_before;
            if pages > 0 {
                batch_prep_ns += elapsed;
                batch_io_pages += pages;
            } else {
                infer_ns += elapsed;
            }

            if outputs.len() != node.outputs.len() {
                return Err(RunnerError::NodeFailed {
                    seq: node.seq,
                    op: node.op.clone(),
                    source: Box::new(RunnerError::BadValue(format!(
                        "kernel produced {} outputs, node declares {}",
                        outputs.len(),
                        node.outputs.len()
                    ))),
                });
            }
            for (label, value) in node.outputs.iter().zip(outputs) {
                env.insert(label.clone(), value);
            }
            trace.push(TraceEntry {
                seq: node.seq,
                op: node.op.clone(),
                device: profile.name.clone(),
            });
        }

        let mut outputs = HashMap::new();
        for (name, label) in &graph.outputs {
            let value = env
                .get(label)
                .cloned()
                .ok_or_else(|| RunnerError::MissingInput(label.clone()))?;
            outputs.insert(name.clone(), value);
        }
        Ok(ExecutionReport {
            outputs,
            trace,
            batch_prep_ns,
            infer_ns,
            batch_io_pages,
        })
    }

    fn batch_pages_read(&self) -> u64 {
        self.store
            .as_ref()
            .map(|s| s.device().snapshot_counters().tag(TAG_BATCH_GET).pages_read)
            .unwrap_or(0)
    }

    // ------------------------------------------------------------------
    // Plugins
    // ------------------------------------------------------------------

    /// Makes a compiled-in plugin available to `plugin_static`.
    pub fn register_static_plugin(&self, plugin: StaticPlugin) {
        self.static_plugins
            .lock()
            .insert(plugin.name.to_string(), plugin);
    }

    /// Runs a compiled-in plugin's init against the registry.
    pub fn plugin_static(&self, name: &str) -> Result<()> {
        let plugin = self
            .static_plugins
            .lock()
            .get(name)
            .copied()
            .ok_or_else(|| RunnerError::UnknownStaticPlugin(name.to_string()))?;
        let mut host = RegistryHost {
            registry: &mut self.registry.write(),
        };
        let status = (plugin.init)(&mut host);
        if status != 0 {
            return Err(RunnerError::PluginInitFailed(status));
        }
        Ok(())
    }

    /// Loads a shared module and invokes its init entry point. The
    /// module stays mapped for the life of the runner.
    pub fn plugin_load(&self, path: &Path) -> Result<()> {
        let lib = LoadedLibrary::open(path)?;
        let init = lib.entry_point()?;
        let status = {
            let mut registry = self.registry.write();
            let mut host = RegistryHost {
                registry: &mut registry,
            };
            unsafe { init(&mut host) }
        };
        if status != 0 {
            return Err(RunnerError::PluginInitFailed(status));
        }
        self.loaded_libs.lock().push(lib);
        Ok(())
    }

    // ------------------------------------------------------------------
    // Reprogramming
    // ------------------------------------------------------------------

    /// Swaps the user-logic backend set: every non-shell device and its
    /// kernels go away, the bundle's devices and bindings come in, all
    /// atomically. Fails without side effects if a DFG is executing or
    /// the bundle is malformed.
    pub fn program(&self, bundle_text: &str) -> Result<()> {
        let bundle = ProfileBundle::parse(bundle_text)?;
        // Resolve everything before touching the registry.
        let mut resolved = Vec::with_capacity(bundle.bindings.len());
        for binding in &bundle.bindings {
            if !bundle.devices.iter().any(|d| d.name == binding.device) {
                return Err(RunnerError::UnknownDevice(binding.device.clone()));
            }
            let kernel = builtins::builtin_kernel(&binding.kernel_id)
                .ok_or_else(|| RunnerError::UnknownKernelId(binding.kernel_id.clone()))?;
            resolved.push((binding.op.clone(), binding.device.clone(), kernel));
        }

        let mut registry = self
            .registry
            .try_write()
            .ok_or(RunnerError::ProgramDuringExecution)?;
        registry.drop_user_logic();
        for profile in bundle.devices {
            registry.register_device(profile, false)?;
        }
        for (op, device, kernel) in resolved {
            registry.register_op(&op, &device, kernel)?;
        }
        Ok(())
    }
}

/// Registration surface handed to plugin init functions.
pub trait PluginHost {
    fn register_device(&mut self, name: &str, priority: i64) -> Result<()>;
    fn register_device_profile(&mut self, profile: DeviceProfile) -> Result<()>;
    fn register_op_definition(
        &mut self,
        op: &str,
        device: &str,
        kernel: Arc<dyn Kernel>,
    ) -> Result<()>;
    /// Lets plugins rebind the stock kernels instead of shipping code.
    fn builtin_kernel(&self, id: &str) -> Option<Arc<dyn Kernel>>;
}

struct RegistryHost<'a> {
    registry: &'a mut Registry,
}

impl PluginHost for RegistryHost<'_> {
    fn register_device(&mut self, name: &str, priority: i64) -> Result<()> {
        self.registry
            .register_device(DeviceProfile::new(name, priority), false)
    }

    fn register_device_profile(&mut self, profile: DeviceProfile) -> Result<()> {
        self.registry.register_device(profile, false)
    }

    fn register_op_definition(
        &mut self,
        op: &str,
        device: &str,
        kernel: Arc<dyn Kernel>,
    ) -> Result<()> {
        self.registry.register_op(op, device, kernel)
    }

    fn builtin_kernel(&self, id: &str) -> Option<Arc<dyn Kernel>> {
        builtins::builtin_kernel(id)
    }
}
