//! Shared helpers for the integration suites: an independent descriptor
//! reimplementation used as a cross-check oracle, synthetic corpus
//! builders, and a harness for driving the installed binary.
#![allow(dead_code)]

use std::ffi::OsStr;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

/// Path of the compiled `elghp` binary under test.
pub const BIN: &str = env!("CARGO_BIN_EXE_elghp");

// --- independent descriptor oracle -------------------------------------
//
// Everything below recomputes features from first principles with its own
// tables and plain integer arithmetic, so a mistake in the library cannot
// be inherited by the checks that use it.

/// Derivative directions for each angular multiplier, x right / y down.
fn oracle_offsets(delta: u8) -> [(i32, i32); 4] {
    match delta {
        1 => [(1, 0), (1, -1), (0, -1), (-1, -1)],
        2 => [(1, 0), (0, -1), (-1, 0), (0, 1)],
        _ => panic!("oracle supports delta 1 and 2"),
    }
}

/// Unit ring offsets, clockwise from the top-left corner.
const ORACLE_RING: [(i32, i32); 8] =
    [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];

/// The six unordered direction pairs, in fixed order.
const ORACLE_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Reference feature extraction by inline recomputation at every pixel.
pub fn naive_features(pixels: &[u8], w: usize, h: usize, delta: u8, radii: &[usize]) -> Vec<u32> {
    assert_eq!(pixels.len(), w * h);
    let at = |x: i32, y: i32| -> i32 { i32::from(pixels[y as usize * w + x as usize]) };
    let offsets = oracle_offsets(delta);
    let deriv = |x: i32, y: i32, alpha: usize, d: i32| -> i32 {
        let (ox, oy) = offsets[alpha];
        at(x, y) - at(x + ox * d, y + oy * d)
    };
    let mut out = Vec::with_capacity(radii.len() * ORACLE_PAIRS.len() * 512);
    for &d in radii {
        let m = 2 * d;
        assert!(w > 2 * m && h > 2 * m, "oracle image too small for radius {d}");
        let di = d as i32;
        for (a, b) in ORACLE_PAIRS {
            let mut hist = vec![0u32; 512];
            for y in m..h - m {
                for x in m..w - m {
                    let (x, y) = (x as i32, y as i32);
                    let mut code = u16::from(deriv(x, y, a, di) > deriv(x, y, b, di));
                    for (rx, ry) in ORACLE_RING {
                        let (nx, ny) = (x + rx * di, y + ry * di);
                        code = (code << 1)
                            | u16::from(deriv(nx, ny, a, di) > deriv(nx, ny, b, di));
                    }
                    hist[code as usize] += 1;
                }
            }
            out.extend_from_slice(&hist);
        }
    }
    out
}

// --- synthetic corpora ---------------------------------------------------

/// Write a binary PGM without going through the library under test.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) {
    assert_eq!(pixels.len(), w * h);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).unwrap();
}

/// A 64x64 texture unique to `identity`, plus a small deterministic
/// per-image perturbation, so images of one identity stay far closer to
/// each other than to any other identity's images.
pub fn face_pixels(identity: usize, image: usize) -> Vec<u8> {
    let (fx, fy) = (2 * identity + 3, identity + 2);
    let mut pix = Vec::with_capacity(64 * 64);
    for y in 0..64usize {
        for x in 0..64usize {
            let base = ((x * fx + y * fy) % 241) as i32;
            let noise = ((x * 31 + y * 17 + image * 53) % 5) as i32 - 2;
            pix.push((base + noise).clamp(0, 255) as u8);
        }
    }
    pix
}

/// Populate `dir` with `identities x per_identity` convention-named faces.
pub fn write_corpus(dir: &Path, identities: usize, per_identity: usize) {
    for i in 0..identities {
        for k in 1..=per_identity {
            let name = format!("person{i:02}_{k}.pgm");
            write_pgm(&dir.join(name), 64, 64, &face_pixels(i, k));
        }
    }
}

// --- binary harness -------------------------------------------------------

/// Run the binary to completion and collect its output.
pub fn run_bin<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    Command::new(BIN).args(args).output().expect("spawn elghp binary")
}

/// A `serve` child process that is killed when the guard is dropped.
pub struct ServerGuard {
    child: Child,
    /// The `host:port` the server actually bound.
    pub addr: String,
}

impl ServerGuard {
    /// Hostname half of [`Self::addr`].
    pub fn host(&self) -> &str {
        self.addr.rsplit_once(':').expect("addr has a port").0
    }

    /// Port half of [`Self::addr`].
    pub fn port(&self) -> &str {
        self.addr.rsplit_once(':').expect("addr has a port").1
    }
}

impl Drop for ServerGuard {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Start `elghp serve` on an ephemeral port and wait until it announces
/// the address it bound.
pub fn spawn_server(gallery_dir: &Path, extra: &[&str]) -> ServerGuard {
    let mut child = Command::new(BIN)
        .arg("serve")
        .arg(gallery_dir)
        .args(["--port", "0"])
        .args(extra)
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn elghp serve");
    let stderr = child.stderr.take().expect("stderr is piped");
    let mut reader = BufReader::new(stderr);
    let mut line = String::new();
    let addr = loop {
        line.clear();
        if reader.read_line(&mut line).expect("read server stderr") == 0 {
            let _ = child.kill();
            panic!("server exited before announcing its address");
        }
        if let Some((_, rest)) = line.trim_end().split_once("listening on ") {
            break rest.to_owned();
        }
    };
    ServerGuard { child, addr }
}

// --- misc ------------------------------------------------------------------

/// Split CSV text into rows of cells (no quoting; none is emitted).
pub fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|line| line.split(',').map(str::to_owned).collect()).collect()
}

pub fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

pub fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}
