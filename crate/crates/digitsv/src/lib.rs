//! Standard-library companion to `digitsv-core`: file formats, checkpoints,
//! configuration, and the pipeline commands behind the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod formats;
pub mod pipeline;
pub mod wav;

/// `digitsv-core` is no_std and its error type carries no std trait impls,
/// so results crossing into this crate get lifted into `anyhow` by message.
pub(crate) trait CoreExt<T> {
    fn core_err(self) -> anyhow::Result<T>;
}

impl<T> CoreExt<T> for Result<T, digitsv_core::error::Error> {
    fn core_err(self) -> anyhow::Result<T> {
        self.map_err(anyhow::Error::msg)
    }
}
