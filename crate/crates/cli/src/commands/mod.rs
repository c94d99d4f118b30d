pub mod maps;
pub mod models;
pub mod probing;
pub mod seg;

use std::cell::RefCell;
use std::path::PathBuf;

use anyhow::Result;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::run::{resolve_params, InputRef, LogSink, Run};

/// Global options shared by every command.
pub struct Ctx {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub log: LogSink,
    /// Run directory created so far, removed again if the command fails.
    pub created: RefCell<Option<PathBuf>>,
}

impl Ctx {
    pub fn params<P: Serialize + DeserializeOwned + Default>(&self) -> Result<P> {
        resolve_params(self.config.as_deref(), &self.sets, self.seed)
    }

    pub fn start<P: Serialize>(&self, command: &str, params: &P, inputs: Vec<InputRef>) -> Result<Run> {
        let run = Run::create(&self.out, command, params, &inputs, &self.log)?;
        *self.created.borrow_mut() = Some(run.dir.clone());
        Ok(run)
    }
}
