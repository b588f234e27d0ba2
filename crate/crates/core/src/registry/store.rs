use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Change, RegistryError, RegistryState};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {source}")]
    Corrupt { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}: logged change {seq} no longer applies: {source}")]
    Replay { path: PathBuf, seq: u64, source: RegistryError },
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    seq: u64,
    state: RegistryState,
}

#[derive(Serialize, Deserialize)]
struct LogEntry {
    seq: u64,
    change: Change,
}

/// Receives the retained configuration of a node after every accepted change
/// that touches it. `None` clears it.
pub trait ConfigSink: Send + Sync {
    fn node_config(&self, node_id: &str, payload: Option<Vec<u8>>);
}

#[derive(Debug)]
struct Files {
    state_path: PathBuf,
    log_path: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

impl Files {
    fn new(state_path: PathBuf) -> Self {
        let mut log = state_path.clone().into_os_string();
        log.push(".log");
        Files { state_path, log_path: PathBuf::from(log) }
    }

    fn load(&self) -> Result<(u64, RegistryState), StoreError> {
        let (mut seq, mut state) = match fs::read(&self.state_path) {
            Ok(bytes) => {
                let f: StateFile = serde_json::from_slice(&bytes).map_err(|source| StoreError::Corrupt {
                    path: self.state_path.clone(),
                    line: source.line(),
                    source,
                })?;
                (f.seq, f.state)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => (0, RegistryState::default()),
            Err(e) => return Err(io_err(&self.state_path)(e)),
        };
        for entry in read_log(&self.log_path)? {
            // The state file already covers everything up to its own seq.
            if entry.seq <= seq {
                continue;
            }
            state.apply(&entry.change).map_err(|source| StoreError::Replay {
                path: self.log_path.clone(),
                seq: entry.seq,
                source,
            })?;
            seq = entry.seq;
        }
        Ok((seq, state))
    }

    fn append(&self, seq: u64, change: &Change) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(&LogEntry { seq, change: change.clone() }).expect("change serializes");
        line.push(b'\n');
        let err = io_err(&self.log_path);
        let mut f = OpenOptions::new().create(true).append(true).open(&self.log_path).map_err(io_err(&self.log_path))?;
        f.write_all(&line).and_then(|_| f.sync_data()).map_err(err)
    }

    fn write_state(&self, seq: u64, state: &RegistryState) -> Result<(), StoreError> {
        let mut tmp = self.state_path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let bytes = serde_json::to_vec_pretty(&StateFile { seq, state: state.clone() }).expect("state serializes");
        let write = || -> io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &self.state_path)
        };
        write().map_err(io_err(&self.state_path))
    }
}

/// Reads every complete entry of a change log. A torn final line, left by a
/// crash mid-append, is ignored.
fn read_log(path: &Path) -> Result<Vec<LogEntry>, StoreError> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<String> = BufReader::new(f).lines().collect::<Result<_, _>>().map_err(io_err(path))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogEntry>(line) {
            Ok(e) => out.push(e),
            Err(_) if i + 1 == lines.len() => log::warn!("{}: ignoring torn final entry", path.display()),
            Err(source) => return Err(StoreError::Corrupt { path: path.to_path_buf(), line: i + 1, source }),
        }
    }
    Ok(out)
}

/// Replays a change log from an empty state. Used to check that the state
/// file and the log agree.
pub fn replay_log(state_path: &Path) -> Result<RegistryState, StoreError> {
    let files = Files::new(state_path.to_path_buf());
    let mut state = RegistryState::default();
    for e in read_log(&files.log_path)? {
        state
            .apply(&e.change)
            .map_err(|source| StoreError::Replay { path: files.log_path.clone(), seq: e.seq, source })?;
    }
    Ok(state)
}

struct Writer {
    seq: u64,
    files: Option<Files>,
}

/// The live registry. One writer at a time; readers take cheap snapshots.
pub struct Registry {
    current: RwLock<Arc<RegistryState>>,
    writer: Mutex<Writer>,
    sink: RwLock<Option<Arc<dyn ConfigSink>>>,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry").field("state", &*self.current.read()).finish_non_exhaustive()
    }
}

impl Registry {
    pub fn in_memory() -> Self {
        Self::with(0, RegistryState::default(), None)
    }

    /// Loads the state file and the tail of its change log, creating neither
    /// until the first change is accepted.
    pub fn open(state_path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let files = Files::new(state_path.into());
        let (seq, state) = files.load()?;
        // Probe writability now rather than on the first API call.
        if let Some(dir) = files.state_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        OpenOptions::new().create(true).append(true).open(&files.log_path).map_err(io_err(&files.log_path))?;
        Ok(Self::with(seq, state, Some(files)))
    }

    fn with(seq: u64, state: RegistryState, files: Option<Files>) -> Self {
        Registry {
            current: RwLock::new(Arc::new(state)),
            writer: Mutex::new(Writer { seq, files }),
            sink: RwLock::new(None),
        }
    }

    pub fn state_path(&self) -> Option<PathBuf> {
        self.writer.lock().files.as_ref().map(|f| f.state_path.clone())
    }

    /// Attaches the retained-config publisher and pushes every node's current
    /// configuration through it.
    pub fn set_sink(&self, sink: Arc<dyn ConfigSink>) {
        let _w = self.writer.lock();
        for node in self.snapshot().nodes.values() {
            sink.node_config(&node.node_id, Some(config_payload(node)));
        }
        *self.sink.write() = Some(sink);
    }

    pub fn snapshot(&self) -> Arc<RegistryState> {
        self.current.read().clone()
    }

    /// Validates, persists, publishes, then returns the new state. Nothing is
    /// visible to readers unless the change is durable.
    pub fn apply(&self, change: Change) -> Result<Arc<RegistryState>, RegistryError> {
        let mut w = self.writer.lock();
        let mut next = (*self.snapshot()).clone();
        next.apply(&change)?;
        let seq = w.seq + 1;
        if let Some(files) = &w.files {
            files.append(seq, &change).map_err(|e| RegistryError::Storage(e.to_string()))?;
            files.write_state(seq, &next).map_err(|e| RegistryError::Storage(e.to_string()))?;
        }
        w.seq = seq;
        let next = Arc::new(next);
        *self.current.write() = next.clone();
        if let (Some(sink), Some(node_id)) = (self.sink.read().as_ref(), change.touched_node()) {
            sink.node_config(node_id, next.nodes.get(node_id).map(config_payload));
        }
        Ok(next)
    }

    pub fn seq(&self) -> u64 {
        self.writer.lock().seq
    }
}

pub fn config_payload(node: &super::NodeDescriptor) -> Vec<u8> {
    serde_json::to_vec(&node.config_command()).expect("config serializes")
}
