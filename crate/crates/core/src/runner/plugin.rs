//! Plugin loading. The primary mechanism is a native shared module
//! exposing `hgnn_init_kernel_plugin`; a static registry compiled into
//! the binary covers environments that forbid dynamic loading.

use std::ffi::CString;
use std::path::Path;

use super::{PluginHost, RunnerError};

/// Entry-point symbol every loadable extension must export.
pub const PLUGIN_ENTRY: &str = "hgnn_init_kernel_plugin";

/// Signature of the entry point: receives the registration host and
/// returns 0 on success. Plugins are built in-tree with the same
/// toolchain, which is what makes the Rust-ABI boundary sound.
pub type PluginInitFn = unsafe fn(&mut dyn PluginHost) -> i32;

/// A plugin compiled into the binary.
#[derive(Clone, Copy)]
pub struct StaticPlugin {
    pub name: &'static str,
    pub init: fn(&mut dyn PluginHost) -> i32,
}

pub(super) struct LoadedLibrary {
    handle: *mut libc::c_void,
}

// The handle is only used to resolve one symbol and is never released,
// so sharing it across threads is safe.
unsafe impl Send for LoadedLibrary {}
unsafe impl Sync for LoadedLibrary {}

impl LoadedLibrary {
    pub(super) fn open(path: &Path) -> Result<Self, RunnerError> {
        let cpath = CString::new(path.to_string_lossy().as_bytes())
            .map_err(|_| RunnerError::PluginLoad("path contains NUL".into()))?;
        let handle = unsafe { libc::dlopen(cpath.as_ptr(), libc::RTLD_NOW) };
        if handle.is_null() {
            return Err(RunnerError::PluginLoad(dlerror_string()));
        }
        Ok(Self { handle })
    }

    pub(super) fn entry_point(&self) -> Result<PluginInitFn, RunnerError> {
        let symbol = CString::new(PLUGIN_ENTRY).unwrap();
        let sym = unsafe { libc::dlsym(self.handle, symbol.as_ptr()) };
        if sym.is_null() {
            return Err(RunnerError::MissingEntryPoint(PLUGIN_ENTRY.into()));
        }
        // Same-workspace, same-toolchain modules only; see PluginInitFn.
        Ok(unsafe { std::mem::transmute::<*mut libc::c_void, PluginInitFn>(sym) })
    }
}

fn dlerror_string() -> String {
    let err = unsafe { libc::dlerror() };
    if err.is_null() {
        "unknown dlopen failure".into()
    } else {
        unsafe { std::ffi::CStr::from_ptr(err) }
            .to_string_lossy()
            .into_owned()
    }
}
