//! TCP verification and registration protocol, plus the gallery server.
//!
//! Verification is features-only: clients extract descriptors locally and
//! only those histograms cross the wire, so probe images never leave the
//! client machine. Registration is the one image-bearing operation; the
//! server persists the new identity's images into its gallery directory and
//! confirms by echoing the client-chosen user id.
//!
//! Framing: every message is `[4-byte big-endian payload length][1-byte
//! type][payload]`, all integers big-endian, text fields encoded as a 2-byte
//! length followed by UTF-8 bytes.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::thread;

use thiserror::Error;

use crate::descriptor::{
    extract_features, put_counts, take_counts, DescriptorConfig, DescriptorError, FeatureVector,
};
use crate::imageio::{self, GrayImage, PgmError};
use crate::matcher::{nearest, GalleryEntry};

pub const DEFAULT_PORT: u16 = 7100;

/// Upper bound on accepted frame payloads.
pub const MAX_PAYLOAD: u32 = 64 * 1024 * 1024;

const TYPE_VERIFY_REQUEST: u8 = 0x01;
const TYPE_VERIFY_RESPONSE: u8 = 0x02;
const TYPE_REGISTER_REQUEST: u8 = 0x03;
const TYPE_REGISTER_RESPONSE: u8 = 0x04;
const TYPE_ERROR: u8 = 0x7F;

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("connection closed")]
    Closed,
    #[error("frame payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    FrameTooLarge(u32),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("truncated {0} field")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after message payload")]
    TrailingBytes(usize),
    #[error("text field is not valid UTF-8")]
    InvalidUtf8,
    #[error("{field} exceeds the wire format limit of {max}")]
    FieldTooLarge { field: &'static str, max: usize },
    #[error("invalid image in register request: {0}")]
    InvalidImage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error("server error: {0}")]
    Server(String),
    #[error(transparent)]
    Image(#[from] PgmError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("unexpected reply message")]
    UnexpectedReply,
    #[error("{0}")]
    InvalidInput(String),
}

/// Every frame the protocol can carry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    /// Claimed identity plus locally extracted probe features.
    VerifyRequest { user_id: String, vectors: Vec<FeatureVector> },
    /// Verdict; `identity` equals the claimed id when matched, else empty.
    VerifyResponse { matched: bool, identity: String },
    /// New identity with raw canonical images for enrollment.
    RegisterRequest { user_id: String, images: Vec<GrayImage> },
    /// Enrollment verdict with the server-side user id echo.
    RegisterResponse { accepted: bool, user_id: String },
    /// Server-side failure description.
    Error { message: String },
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_text(out: &mut Vec<u8>, text: &str, field: &'static str) -> Result<(), ProtoError> {
    let len = u16::try_from(text.len())
        .map_err(|_| ProtoError::FieldTooLarge { field, max: u16::MAX as usize })?;
    put_u16(out, len);
    out.extend_from_slice(text.as_bytes());
    Ok(())
}

fn checked_u16(value: usize, field: &'static str) -> Result<u16, ProtoError> {
    u16::try_from(value).map_err(|_| ProtoError::FieldTooLarge { field, max: u16::MAX as usize })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], ProtoError> {
        let end = self.pos.checked_add(n).ok_or(ProtoError::Truncated(field))?;
        let chunk = self.bytes.get(self.pos..end).ok_or(ProtoError::Truncated(field))?;
        self.pos = end;
        Ok(chunk)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, ProtoError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, ProtoError> {
        let chunk = self.take(2, field)?;
        Ok(u16::from_be_bytes(chunk.try_into().expect("2-byte slice")))
    }

    fn text(&mut self, field: &'static str) -> Result<String, ProtoError> {
        let len = self.u16(field)? as usize;
        let chunk = self.take(len, field)?;
        String::from_utf8(chunk.to_vec()).map_err(|_| ProtoError::InvalidUtf8)
    }

    fn counts(&mut self, field: &'static str) -> Result<Vec<u32>, ProtoError> {
        take_counts(self.bytes, &mut self.pos).ok_or(ProtoError::Truncated(field))
    }

    fn finish(self) -> Result<(), ProtoError> {
        let rest = self.bytes.len() - self.pos;
        if rest > 0 {
            return Err(ProtoError::TrailingBytes(rest));
        }
        Ok(())
    }
}

/// Serialize a message as one complete frame.
pub fn encode_message(msg: &Message) -> Result<Vec<u8>, ProtoError> {
    let mut payload = Vec::new();
    let tag = match msg {
        Message::VerifyRequest { user_id, vectors } => {
            put_text(&mut payload, user_id, "user id")?;
            put_u16(&mut payload, checked_u16(vectors.len(), "vector count")?);
            for v in vectors {
                put_counts(&mut payload, v.counts());
            }
            TYPE_VERIFY_REQUEST
        }
        Message::VerifyResponse { matched, identity } => {
            payload.push(u8::from(*matched));
            put_text(&mut payload, identity, "identity")?;
            TYPE_VERIFY_RESPONSE
        }
        Message::RegisterRequest { user_id, images } => {
            put_text(&mut payload, user_id, "user id")?;
            put_u16(&mut payload, checked_u16(images.len(), "image count")?);
            for img in images {
                put_u16(&mut payload, checked_u16(img.width(), "image width")?);
                put_u16(&mut payload, checked_u16(img.height(), "image height")?);
                payload.extend_from_slice(img.pixels());
            }
            TYPE_REGISTER_REQUEST
        }
        Message::RegisterResponse { accepted, user_id } => {
            payload.push(u8::from(*accepted));
            put_text(&mut payload, user_id, "user id")?;
            TYPE_REGISTER_RESPONSE
        }
        Message::Error { message } => {
            put_text(&mut payload, message, "error message")?;
            TYPE_ERROR
        }
    };
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l <= MAX_PAYLOAD)
        .ok_or(ProtoError::FrameTooLarge(payload.len() as u32))?;
    let mut frame = Vec::with_capacity(5 + payload.len());
    frame.extend_from_slice(&len.to_be_bytes());
    frame.push(tag);
    frame.extend_from_slice(&payload);
    Ok(frame)
}

fn decode_payload(tag: u8, payload: &[u8]) -> Result<Message, ProtoError> {
    let mut cur = Cursor { bytes: payload, pos: 0 };
    let msg = match tag {
        TYPE_VERIFY_REQUEST => {
            let user_id = cur.text("user id")?;
            let count = cur.u16("vector count")?;
            let mut vectors = Vec::with_capacity(count as usize);
            for _ in 0..count {
                vectors.push(FeatureVector::new(cur.counts("feature vector")?));
            }
            Message::VerifyRequest { user_id, vectors }
        }
        TYPE_VERIFY_RESPONSE => {
            let matched = cur.u8("matched flag")? != 0;
            let identity = cur.text("identity")?;
            Message::VerifyResponse { matched, identity }
        }
        TYPE_REGISTER_REQUEST => {
            let user_id = cur.text("user id")?;
            let count = cur.u16("image count")?;
            let mut images = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let w = cur.u16("image width")? as usize;
                let h = cur.u16("image height")? as usize;
                let pixels = cur.take(w * h, "image pixels")?.to_vec();
                let img = GrayImage::new(w, h, pixels)
                    .map_err(|e| ProtoError::InvalidImage(e.to_string()))?;
                images.push(img);
            }
            Message::RegisterRequest { user_id, images }
        }
        TYPE_REGISTER_RESPONSE => {
            let accepted = cur.u8("accepted flag")? != 0;
            let user_id = cur.text("user id")?;
            Message::RegisterResponse { accepted, user_id }
        }
        TYPE_ERROR => Message::Error { message: cur.text("error message")? },
        other => return Err(ProtoError::UnknownType(other)),
    };
    cur.finish()?;
    Ok(msg)
}

/// Read one framed message. A connection closed cleanly before the length
/// prefix yields [`ProtoError::Closed`].
pub fn read_message<R: Read>(r: &mut R) -> Result<Message, ProtoError> {
    let mut len_buf = [0u8; 4];
    if let Err(err) = r.read_exact(&mut len_buf) {
        return Err(if err.kind() == io::ErrorKind::UnexpectedEof {
            ProtoError::Closed
        } else {
            ProtoError::Io(err)
        });
    }
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_PAYLOAD {
        return Err(ProtoError::FrameTooLarge(len));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    decode_payload(tag[0], &payload)
}

/// Write one framed message.
pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), ProtoError> {
    let frame = encode_message(msg)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

/// The identity holding a unique plurality of the votes; `None` when the
/// top count is shared.
fn majority(votes: &[String]) -> Option<&str> {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for vote in votes {
        match counts.iter_mut().find(|(id, _)| *id == vote.as_str()) {
            Some((_, n)) => *n += 1,
            None => counts.push((vote.as_str(), 1)),
        }
    }
    let best = counts.iter().map(|&(_, n)| n).max()?;
    let mut winners = counts.iter().filter(|&&(_, n)| n == best);
    let winner = winners.next()?.0;
    if winners.next().is_some() {
        None
    } else {
        Some(winner)
    }
}

/// Load every `.pgm` in `dir` (sorted by file name), canonicalize, and
/// extract its features.
pub fn load_gallery(dir: &Path, cfg: &DescriptorConfig) -> Result<Vec<GalleryEntry>, NetError> {
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("pgm")) {
            paths.push(path);
        }
    }
    paths.sort();
    let mut gallery = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .map(str::to_owned)
            .ok_or_else(|| {
                NetError::InvalidInput(format!("non-UTF-8 file name under {}", dir.display()))
            })?;
        let img = imageio::resize_to_canonical(&imageio::load_pgm_file(&path)?);
        let features = extract_features(&img, cfg)?;
        gallery.push(GalleryEntry::new(name, features));
    }
    Ok(gallery)
}

/// Gallery server: holds enrolled features behind a read-write lock so any
/// number of verifications proceed concurrently while registrations take
/// exclusive access.
pub struct FaceServer {
    gallery: RwLock<Vec<GalleryEntry>>,
    gallery_dir: PathBuf,
    cfg: DescriptorConfig,
}

impl FaceServer {
    /// Extract features for every gallery image up front.
    pub fn new(gallery_dir: impl Into<PathBuf>, cfg: DescriptorConfig) -> Result<Self, NetError> {
        let gallery_dir = gallery_dir.into();
        let gallery = load_gallery(&gallery_dir, &cfg)?;
        Ok(Self { gallery: RwLock::new(gallery), gallery_dir, cfg })
    }

    /// Current number of enrolled images. Registration appends all of a
    /// request's entries under one write lock, so concurrent readers only
    /// ever observe pre- or post-registration sizes.
    pub fn gallery_len(&self) -> usize {
        self.gallery.read().expect("gallery lock").len()
    }

    /// Accept connections forever, one handler thread per client.
    pub fn run(self, listener: TcpListener) -> ! {
        let shared = Arc::new(self);
        loop {
            match listener.accept() {
                Ok((stream, _)) => {
                    let server = Arc::clone(&shared);
                    thread::spawn(move || server.handle_connection(stream));
                }
                Err(err) => eprintln!("accept failed: {err}"),
            }
        }
    }

    /// Serve one client until it disconnects or breaks the protocol.
    pub fn handle_connection(&self, mut stream: TcpStream) {
        loop {
            let reply = match read_message(&mut stream) {
                Ok(Message::VerifyRequest { user_id, vectors }) => {
                    self.verify(&user_id, &vectors)
                }
                Ok(Message::RegisterRequest { user_id, images }) => {
                    self.register(&user_id, &images)
                }
                Ok(_) => Message::Error { message: "unexpected message type".to_owned() },
                Err(ProtoError::Closed) => return,
                Err(err) => {
                    let _ = write_message(
                        &mut stream,
                        &Message::Error { message: err.to_string() },
                    );
                    return;
                }
            };
            if write_message(&mut stream, &reply).is_err() {
                return;
            }
        }
    }

    /// Classify every probe vector with 1NN, combine the per-vector
    /// identities by plurality vote (ties reject), and match only when the
    /// winner equals the claimed id.
    pub fn verify(&self, user_id: &str, vectors: &[FeatureVector]) -> Message {
        if vectors.is_empty() {
            return Message::Error { message: "no feature vectors".to_owned() };
        }
        if vectors.iter().any(|v| v.len() != self.cfg.feature_len()) {
            return Message::Error { message: "dimension mismatch".to_owned() };
        }
        let gallery = self.gallery.read().expect("gallery lock");
        if gallery.is_empty() {
            return Message::Error { message: "empty gallery".to_owned() };
        }
        let mut votes = Vec::with_capacity(vectors.len());
        for vector in vectors {
            match nearest("probe", vector, &gallery) {
                Ok(result) => votes.push(result.identity),
                Err(err) => return Message::Error { message: err.to_string() },
            }
        }
        let matched = majority(&votes) == Some(user_id);
        Message::VerifyResponse {
            matched,
            identity: if matched { user_id.to_owned() } else { String::new() },
        }
    }

    /// Enroll a new identity: persist its images as `<id>_<k>.pgm` in the
    /// gallery directory and extend the in-memory gallery.
    pub fn register(&self, user_id: &str, images: &[GrayImage]) -> Message {
        if user_id.is_empty() {
            return Message::Error { message: "empty identity".to_owned() };
        }
        if user_id.contains(['/', '\\']) || user_id.contains("..") {
            return Message::Error { message: "invalid identity".to_owned() };
        }
        if images.is_empty() {
            return Message::Error { message: "no images".to_owned() };
        }
        if images.iter().any(|img| !img.is_canonical()) {
            return Message::Error { message: "dimension mismatch".to_owned() };
        }
        // Extraction is pure, so it happens before taking the write lock;
        // the duplicate check runs under the lock where it is authoritative.
        let mut entries = Vec::with_capacity(images.len());
        for (k, img) in images.iter().enumerate() {
            let name = format!("{user_id}_{}.pgm", k + 1);
            match extract_features(img, &self.cfg) {
                Ok(features) => entries.push(GalleryEntry::new(name, features)),
                Err(err) => return Message::Error { message: err.to_string() },
            }
        }
        let mut gallery = self.gallery.write().expect("gallery lock");
        if gallery.iter().any(|entry| entry.identity == user_id) {
            return Message::Error { message: "identity exists".to_owned() };
        }
        for (img, entry) in images.iter().zip(&entries) {
            let path = self.gallery_dir.join(&entry.name);
            if let Err(err) = imageio::save_pgm(img, &path) {
                return Message::Error {
                    message: format!("cannot persist {}: {err}", entry.name),
                };
            }
        }
        gallery.extend(entries);
        Message::RegisterResponse { accepted: true, user_id: user_id.to_owned() }
    }
}

/// Load the gallery, bind, and serve forever.
pub fn serve(
    gallery_dir: &Path,
    cfg: DescriptorConfig,
    addr: &str,
) -> Result<std::convert::Infallible, NetError> {
    let server = FaceServer::new(gallery_dir, cfg)?;
    let listener = TcpListener::bind(addr)?;
    eprintln!(
        "gallery of {} images; listening on {}",
        server.gallery_len(),
        listener.local_addr()?
    );
    server.run(listener)
}

/// Extract features locally and ask the server whether they match the
/// claimed identity. Probe pixels never leave this machine.
pub fn client_verify(
    addr: &str,
    user_id: &str,
    files: &[PathBuf],
    cfg: &DescriptorConfig,
) -> Result<bool, NetError> {
    if files.is_empty() {
        return Err(NetError::InvalidInput("at least one image file is required".to_owned()));
    }
    let mut vectors = Vec::with_capacity(files.len());
    for file in files {
        vectors.push(extract_features(&imageio::load_canonical(file)?, cfg)?);
    }
    let mut stream = TcpStream::connect(addr)?;
    write_message(
        &mut stream,
        &Message::VerifyRequest { user_id: user_id.to_owned(), vectors },
    )?;
    match read_message(&mut stream)? {
        Message::VerifyResponse { matched, .. } => Ok(matched),
        Message::Error { message } => Err(NetError::Server(message)),
        _ => Err(NetError::UnexpectedReply),
    }
}

/// Send raw canonical images for enrollment. Succeeds only when the server
/// accepts and echoes the identical user id.
pub fn client_register(addr: &str, user_id: &str, files: &[PathBuf]) -> Result<bool, NetError> {
    if user_id.is_empty() {
        return Err(NetError::InvalidInput("user id must not be empty".to_owned()));
    }
    if files.is_empty() {
        return Err(NetError::InvalidInput("at least one image file is required".to_owned()));
    }
    let mut images = Vec::with_capacity(files.len());
    for file in files {
        images.push(imageio::load_canonical(file)?);
    }
    let mut stream = TcpStream::connect(addr)?;
    write_message(
        &mut stream,
        &Message::RegisterRequest { user_id: user_id.to_owned(), images },
    )?;
    match read_message(&mut stream)? {
        Message::RegisterResponse { accepted, user_id: echoed } => {
            Ok(accepted && echoed == user_id)
        }
        Message::Error { message } => Err(NetError::Server(message)),
        _ => Err(NetError::UnexpectedReply),
    }
}
