//! Built-in extensions, addressable by name from `enabled_extensions`.

use crate::config::AgentConfig;
use crate::extension::Extension;
use crate::memory::MemoryExtension;
use crate::notes::NotesExtension;
use crate::tools::{BashExtension, CompleteExtension, FileEditExtension, ViewExtension};

pub const KNOWN_EXTENSIONS: &[&str] = &["file_edit", "bash", "view", "memory", "notes", "complete"];

/// Instantiate the enabled extensions in the order listed.
pub fn build_extensions(config: &AgentConfig) -> Vec<Box<dyn Extension>> {
    config
        .enabled_extensions
        .iter()
        .filter_map(|name| -> Option<Box<dyn Extension>> {
            Some(match name.as_str() {
                "file_edit" => Box::new(FileEditExtension),
                "bash" => Box::new(BashExtension::default()),
                "view" => Box::new(ViewExtension),
                "memory" => Box::new(MemoryExtension),
                "notes" => Box::new(NotesExtension::new(config.notes_dir.as_ref().map(|d| config.resolve(d)))),
                "complete" => Box::new(CompleteExtension),
                _ => return None,
            })
        })
        .collect()
}
