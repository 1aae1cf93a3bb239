//! Heap accounting and brute-force oracles shared by integration tests.

#![allow(dead_code)]

pub mod oracles;

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

pub struct PeakAlloc {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl PeakAlloc {
    pub const fn new() -> Self {
        PeakAlloc {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    /// Runs `f` and returns the highest heap usage above the starting level.
    pub fn peak_during<T>(&self, f: impl FnOnce() -> T) -> (T, usize) {
        let base = self.current.load(Ordering::SeqCst);
        self.peak.store(base, Ordering::SeqCst);
        let out = f();
        let peak = self.peak.load(Ordering::SeqCst);
        (out, peak.saturating_sub(base))
    }

    fn grow(&self, n: usize) {
        let now = self.current.fetch_add(n, Ordering::SeqCst) + n;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }
}

unsafe impl GlobalAlloc for PeakAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            self.grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            self.grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        self.current.fetch_sub(layout.size(), Ordering::SeqCst);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                self.grow(new_size - layout.size());
            } else {
                self.current.fetch_sub(layout.size() - new_size, Ordering::SeqCst);
            }
        }
        p
    }
}

/// Peak heap bytes of one ISAB forward and backward pass over `n` events.
pub fn isab_peak_bytes(alloc: &PeakAlloc, n: usize, m: usize) -> usize {
    use cytoset::layers::{AttentionKind, Isab};
    use cytoset::tensor::{ParamStore, Session, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let mut store = ParamStore::new();
    let isab = Isab::learned(&mut store, "isab", 32, 4, m, AttentionKind::Softmax, &mut rng).unwrap();
    let x = Tensor::from_vec(n, 32, (0..n * 32).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
    let ((), peak) = alloc.peak_during(|| {
        let mut s = Session::new(&mut store, true, 0);
        let xv = s.input(x.clone());
        let y = isab.forward(&mut s, xv).unwrap();
        let loss = s.tape.sum(y).unwrap();
        let grads = s.param_grads(loss).unwrap();
        drop(grads);
    });
    peak
}
