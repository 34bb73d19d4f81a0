//! Parallel extraction/classification pipeline.
//!
//! Worker threads are divided equally between feature extraction and 1NN
//! classification. Each extractor owns a static contiguous share of the
//! input images and pushes (name, features) work items into its own queue,
//! so every queue has exactly one producer. Classifiers poll all queues
//! round-robin and stop once the shared consumed-item counter reaches the
//! input count. A thread count of 1 runs the serial baseline.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::descriptor::{extract_features, DescriptorConfig, FeatureVector};
use crate::imageio::GrayImage;
use crate::matcher::{nearest, GalleryEntry, MatchResult};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("thread count must be 1 or a positive even number, got {0}")]
    InvalidThreadCount(usize),
    #[error("queue capacity must be at least 1")]
    InvalidCapacity,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("gallery entry {name:?} has {found} features, expected {expected}")]
    GalleryDimension { name: String, expected: usize, found: usize },
    #[error("image {name:?} is {width}x{height}, needs at least {min}x{min}")]
    ImageTooSmall { name: String, width: usize, height: usize, min: usize },
}

/// Worker layout: total thread count (1 = serial) and an optional per-queue
/// capacity bound.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    threads: usize,
    queue_capacity: Option<usize>,
}

impl PipelineConfig {
    pub fn new(threads: usize, queue_capacity: Option<usize>) -> Result<Self, PipelineError> {
        if threads == 0 || (threads > 1 && threads % 2 != 0) {
            return Err(PipelineError::InvalidThreadCount(threads));
        }
        if queue_capacity == Some(0) {
            return Err(PipelineError::InvalidCapacity);
        }
        Ok(Self { threads, queue_capacity })
    }

    pub fn serial() -> Self {
        Self { threads: 1, queue_capacity: None }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn queue_capacity(&self) -> Option<usize> {
        self.queue_capacity
    }
}

/// A fully extracted image waiting for classification.
#[derive(Clone, Debug)]
pub struct WorkItem {
    pub name: String,
    pub features: FeatureVector,
}

/// Pipeline outcome: all match results plus wall-clock and per-phase busy
/// times in seconds.
#[derive(Clone, Debug)]
pub struct PipelineReport {
    /// Match results sorted by (query, identity, distance, index) so equal
    /// result multisets compare equal as lists.
    pub results: Vec<MatchResult>,
    pub wall_seconds: f64,
    pub extract_seconds: f64,
    pub classify_seconds: f64,
    pub threads: usize,
}

/// Single-producer FIFO queue with an optional capacity bound. `push` blocks
/// while the queue is full; `try_pop` never blocks.
struct Queue {
    items: Mutex<VecDeque<WorkItem>>,
    space: Condvar,
    capacity: Option<usize>,
}

impl Queue {
    fn new(capacity: Option<usize>) -> Self {
        Self { items: Mutex::new(VecDeque::new()), space: Condvar::new(), capacity }
    }

    fn push(&self, item: WorkItem) {
        let mut items = self.items.lock().expect("queue lock");
        if let Some(cap) = self.capacity {
            while items.len() >= cap {
                items = self.space.wait(items).expect("queue lock");
            }
        }
        items.push_back(item);
    }

    fn try_pop(&self) -> Option<WorkItem> {
        let mut items = self.items.lock().expect("queue lock");
        let item = items.pop_front();
        if item.is_some() {
            self.space.notify_one();
        }
        item
    }
}

/// Split a slice into `parts` contiguous pieces whose lengths differ by at
/// most one.
fn partition<T>(items: &[T], parts: usize) -> Vec<&[T]> {
    let base = items.len() / parts;
    let rem = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < rem);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

fn validate(
    test_images: &[(String, GrayImage)],
    gallery: &[GalleryEntry],
    cfg: &DescriptorConfig,
) -> Result<(), PipelineError> {
    if gallery.is_empty() {
        return Err(PipelineError::EmptyGallery);
    }
    let expected = cfg.feature_len();
    for entry in gallery {
        if entry.features.len() != expected {
            return Err(PipelineError::GalleryDimension {
                name: entry.name.clone(),
                expected,
                found: entry.features.len(),
            });
        }
    }
    let min = cfg.min_image_side();
    for (name, img) in test_images {
        if img.width() < min || img.height() < min {
            return Err(PipelineError::ImageTooSmall {
                name: name.clone(),
                width: img.width(),
                height: img.height(),
                min,
            });
        }
    }
    Ok(())
}

/// Extract features for every test image and classify each against the
/// gallery, using the worker layout in `pcfg`. The result multiset is
/// identical at every thread count.
pub fn run_pipeline(
    test_images: &[(String, GrayImage)],
    gallery: &[GalleryEntry],
    cfg: &DescriptorConfig,
    pcfg: &PipelineConfig,
) -> Result<PipelineReport, PipelineError> {
    validate(test_images, gallery, cfg)?;
    let start = Instant::now();
    let (mut results, extract_seconds, classify_seconds) = if pcfg.threads() == 1 {
        run_serial(test_images, gallery, cfg)
    } else {
        run_parallel(test_images, gallery, cfg, pcfg)
    };
    results.sort_by(|a, b| {
        (&a.query, &a.identity, a.distance, a.index).cmp(&(
            &b.query,
            &b.identity,
            b.distance,
            b.index,
        ))
    });
    Ok(PipelineReport {
        results,
        wall_seconds: start.elapsed().as_secs_f64(),
        extract_seconds,
        classify_seconds,
        threads: pcfg.threads(),
    })
}

fn run_serial(
    test_images: &[(String, GrayImage)],
    gallery: &[GalleryEntry],
    cfg: &DescriptorConfig,
) -> (Vec<MatchResult>, f64, f64) {
    let mut results = Vec::with_capacity(test_images.len());
    let mut extract_busy = Duration::ZERO;
    let mut classify_busy = Duration::ZERO;
    for (name, img) in test_images {
        let t = Instant::now();
        let features = extract_features(img, cfg).expect("image dimensions pre-validated");
        extract_busy += t.elapsed();
        let t = Instant::now();
        let result = nearest(name, &features, gallery).expect("gallery pre-validated");
        classify_busy += t.elapsed();
        results.push(result);
    }
    (results, extract_busy.as_secs_f64(), classify_busy.as_secs_f64())
}

fn run_parallel(
    test_images: &[(String, GrayImage)],
    gallery: &[GalleryEntry],
    cfg: &DescriptorConfig,
    pcfg: &PipelineConfig,
) -> (Vec<MatchResult>, f64, f64) {
    let worker_pairs = pcfg.threads() / 2;
    let total = test_images.len();
    let queues: Vec<Queue> = (0..worker_pairs).map(|_| Queue::new(pcfg.queue_capacity())).collect();
    let consumed = AtomicUsize::new(0);
    let shares = partition(test_images, worker_pairs);

    thread::scope(|scope| {
        let mut extractors = Vec::with_capacity(worker_pairs);
        for (share, queue) in shares.into_iter().zip(&queues) {
            extractors.push(scope.spawn(move || {
                let mut busy = Duration::ZERO;
                for (name, img) in share {
                    let t = Instant::now();
                    let features =
                        extract_features(img, cfg).expect("image dimensions pre-validated");
                    busy += t.elapsed();
                    queue.push(WorkItem { name: name.clone(), features });
                }
                busy.as_secs_f64()
            }));
        }

        let mut classifiers = Vec::with_capacity(worker_pairs);
        for _ in 0..worker_pairs {
            let queues = &queues;
            let consumed = &consumed;
            classifiers.push(scope.spawn(move || {
                let mut busy = Duration::ZERO;
                let mut out = Vec::new();
                while consumed.load(Ordering::SeqCst) < total {
                    let mut idle = true;
                    for queue in queues {
                        if let Some(item) = queue.try_pop() {
                            consumed.fetch_add(1, Ordering::SeqCst);
                            idle = false;
                            let t = Instant::now();
                            let result = nearest(&item.name, &item.features, gallery)
                                .expect("gallery pre-validated");
                            busy += t.elapsed();
                            out.push(result);
                        }
                    }
                    if idle {
                        thread::yield_now();
                    }
                }
                (busy.as_secs_f64(), out)
            }));
        }

        let extract_seconds = extractors.into_iter().map(|h| h.join().expect("extractor")).sum();
        let mut classify_seconds = 0.0;
        let mut results = Vec::with_capacity(total);
        for handle in classifiers {
            let (busy, mut part) = handle.join().expect("classifier");
            classify_seconds += busy;
            results.append(&mut part);
        }
        (results, extract_seconds, classify_seconds)
    })
}

/// Run the same workload once per requested thread count, returning one
/// report per count in order.
pub fn time_pipeline(
    test_images: &[(String, GrayImage)],
    gallery: &[GalleryEntry],
    cfg: &DescriptorConfig,
    thread_counts: &[usize],
    queue_capacity: Option<usize>,
) -> Result<Vec<PipelineReport>, PipelineError> {
    thread_counts
        .iter()
        .map(|&threads| {
            let pcfg = PipelineConfig::new(threads, queue_capacity)?;
            run_pipeline(test_images, gallery, cfg, &pcfg)
        })
        .collect()
}
