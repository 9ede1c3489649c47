//! The deployed-model boundary.
//!
//! A [`BlackBoxModel`] answers probability queries and counts them. It wraps
//! any [`Classifier`] and offers no way back to the wrapped value, so code
//! holding a model can never read its parameters or differentiate through it.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Network};
use crate::tensor::Tensor;

const ROW_SUM_TOL: f64 = 1e-9;

/// Anything that maps a batch to per-class probability rows.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;
    /// Per-sample input shape (without the batch axis).
    fn input_shape(&self) -> Vec<usize>;
    /// Returns a `(batch, num_classes)` tensor of probabilities.
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

/// A local network whose last layer is a softmax.
struct NetworkClassifier {
    net: Network,
    classes: usize,
}

impl Classifier for NetworkClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn input_shape(&self) -> Vec<usize> {
        self.net.input_shape().to_vec()
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBudget {
    pub max_queries: Option<u64>,
    pub consumed: u64,
}

/// Query-only classifier with exact, thread-safe query accounting (one query
/// per sample).
pub struct BlackBoxModel {
    inner: Box<dyn Classifier>,
    num_classes: usize,
    input_shape: Vec<usize>,
    queries: AtomicU64,
    max_queries: Option<u64>,
}

impl std::fmt::Debug for BlackBoxModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlackBoxModel")
            .field("num_classes", &self.num_classes)
            .field("input_shape", &self.input_shape)
            .field("queries", &self.query_count())
            .finish_non_exhaustive()
    }
}

impl BlackBoxModel {
    pub fn new<C: Classifier + 'static>(inner: C) -> Self {
        let num_classes = inner.num_classes();
        let input_shape = inner.input_shape();
        Self {
            inner: Box::new(inner),
            num_classes,
            input_shape,
            queries: AtomicU64::new(0),
            max_queries: None,
        }
    }

    /// Seals a trained network. The network must end in a softmax over a
    /// flat class axis; ownership moves into the wrapper for good.
    pub fn from_network(net: Network) -> Result<Self> {
        match (net.layers().last(), net.output_shape()) {
            (Some(Layer::Softmax), [classes]) if *classes >= 2 => {
                let classes = *classes;
                Ok(Self::new(NetworkClassifier { net, classes }))
            }
            _ => Err(Error::InvalidArgument(
                "deployed network must end in softmax over a flat class axis".into(),
            )),
        }
    }

    pub fn with_budget(mut self, max_queries: u64) -> Self {
        self.max_queries = Some(max_queries);
        self
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    pub fn budget(&self) -> QueryBudget {
        QueryBudget {
            max_queries: self.max_queries,
            consumed: self.query_count(),
        }
    }

    fn reserve(&self, n: u64) -> Result<()> {
        match self.max_queries {
            None => {
                self.queries.fetch_add(n, Ordering::SeqCst);
                Ok(())
            }
            Some(max) => self
                .queries
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| {
                    (c + n <= max).then_some(c + n)
                })
                .map(|_| ())
                .map_err(|consumed| Error::BudgetExhausted {
                    consumed,
                    max,
                    requested: n,
                }),
        }
    }

    /// Returns class probabilities for every sample in `x`.
    pub fn query(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != self.input_shape.len() + 1
            || x.sample_shape() != self.input_shape.as_slice()
        {
            let mut expected = vec![x.shape().first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape(&expected, x.shape()));
        }
        self.reserve(x.batch_size() as u64)?;
        let probs = self.inner.predict(x)?;
        let expected = [x.batch_size(), self.num_classes];
        if probs.shape() != expected {
            return Err(Error::shape(&expected, probs.shape()));
        }
        for i in 0..probs.batch_size() {
            validate_row(i, probs.sample(i))?;
        }
        Ok(probs)
    }

    /// Single-sample convenience around [`BlackBoxModel::query`].
    pub fn query_sample(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let t = Tensor::new(shape, x.to_vec())?;
        Ok(self.query(&t)?.into_data())
    }

    pub fn pseudo_label(&self, x: &Tensor) -> Result<Vec<PseudoLabelRecord>> {
        let probs = self.query(x)?;
        Ok(records_from_probs(&probs))
    }
}

fn validate_row(row: usize, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidProbabilities {
            row,
            reason: "negative or non-finite entry".into(),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::InvalidProbabilities {
            row,
            reason: format!("row sums to {sum}"),
        });
    }
    Ok(())
}

/// The model's own prediction for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub sample_index: usize,
    pub class_id: usize,
    /// Maximum predicted probability.
    pub confidence: f64,
}

/// Argmax with ties going to the lowest class index.
pub fn argmax(p: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = k;
        }
    }
    (best, p[best])
}

pub fn records_from_probs(probs: &Tensor) -> Vec<PseudoLabelRecord> {
    (0..probs.batch_size())
        .map(|i| {
            let (class_id, confidence) = argmax(probs.sample(i));
            PseudoLabelRecord {
                sample_index: i,
                class_id,
                confidence,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Child-process adapter
//
// Requests and responses are a header line followed by an optional binary
// payload in the `BBTT` tensor layout:
//
//   -> INFO\n                       <- OK <classes> <rank> <dims...>\n
//   -> PREDICT <nbytes>\n<tensor>   <- OK <nbytes>\n<tensor>  |  ERR <msg>\n
//   -> QUIT\n                       (server exits)
// ---------------------------------------------------------------------------

struct RemoteIo {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A classifier served by a child process over stdin/stdout.
pub struct RemoteClassifier {
    child: Mutex<Child>,
    io: Mutex<RemoteIo>,
    classes: usize,
    input_shape: Vec<usize>,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::Remote("connection closed".into()));
    }
    Ok(line.trim_end().to_string())
}

fn parse_ok(line: &str) -> Result<Vec<usize>> {
    let mut parts = line.split_whitespace();
    match parts.next() {
        Some("OK") => parts
            .map(|p| {
                p.parse()
                    .map_err(|_| Error::Remote(format!("bad header {line:?}")))
            })
            .collect(),
        Some("ERR") => Err(Error::Remote(line[3..].trim().to_string())),
        _ => Err(Error::Remote(format!("unexpected response {line:?}"))),
    }
}

impl RemoteClassifier {
    /// Spawns `program args...` and performs the `INFO` handshake.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut io = RemoteIo { stdin, stdout };
        io.stdin.write_all(b"INFO\n")?;
        io.stdin.flush()?;
        let fields = parse_ok(&read_header(&mut io.stdout)?)?;
        if fields.len() < 3 || fields[1] + 2 != fields.len() {
            return Err(Error::Remote(format!("malformed INFO response {fields:?}")));
        }
        Ok(Self {
            child: Mutex::new(child),
            io: Mutex::new(io),
            classes: fields[0],
            input_shape: fields[2..].to_vec(),
        })
    }
}

impl Classifier for RemoteClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn input_shape(&self) -> Vec<usize> {
        self.input_shape.clone()
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut io = self
            .io
            .lock()
            .map_err(|_| Error::Remote("poisoned connection".into()))?;
        let payload = x.to_bytes();
        io.stdin
            .write_all(format!("PREDICT {}\n", payload.len()).as_bytes())?;
        io.stdin.write_all(&payload)?;
        io.stdin.flush()?;
        let fields = parse_ok(&read_header(&mut io.stdout)?)?;
        let n = *fields
            .first()
            .ok_or_else(|| Error::Remote("missing payload length".into()))?;
        let mut buf = vec![0u8; n];
        io.stdout.read_exact(&mut buf)?;
        Tensor::read_from(&buf[..])
    }
}

impl Drop for RemoteClassifier {
    fn drop(&mut self) {
        if let Ok(mut io) = self.io.lock() {
            let _ = io.stdin.write_all(b"QUIT\n");
            let _ = io.stdin.flush();
        }
        if let Ok(mut child) = self.child.lock() {
            let _ = child.wait();
        }
    }
}

/// Serves `classifier` on the given streams until `QUIT` or end of input.
pub fn serve<C: Classifier, R: BufRead, W: Write>(
    classifier: &C,
    mut input: R,
    mut output: W,
) -> Result<()> {
    loop {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let line = line.trim_end();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("INFO") => {
                let shape = classifier.input_shape();
                let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                writeln!(
                    output,
                    "OK {} {} {}",
                    classifier.num_classes(),
                    shape.len(),
                    dims.join(" ")
                )?;
            }
            Some("PREDICT") => {
                let n: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Remote(format!("bad request {line:?}")))?;
                let mut buf = vec![0u8; n];
                input.read_exact(&mut buf)?;
                match Tensor::read_from(&buf[..]).and_then(|x| classifier.predict(&x)) {
                    Ok(p) => {
                        let bytes = p.to_bytes();
                        writeln!(output, "OK {}", bytes.len())?;
                        output.write_all(&bytes)?;
                    }
                    Err(e) => writeln!(output, "ERR {}", e.to_string().replace('\n', " "))?,
                }
            }
            Some("QUIT") => return Ok(()),
            _ => writeln!(output, "ERR unknown request {line:?}")?,
        }
        output.flush()?;
    }
}

/// Serves a local network (the server side used by the `serve-model` command).
pub fn serve_network<R: BufRead, W: Write>(net: Network, input: R, output: W) -> Result<()> {
    let classes = match net.output_shape() {
        [c] => *c,
        other => return Err(Error::shape(&[0], other)),
    };
    serve(&NetworkClassifier { net, classes }, input, output)
}
