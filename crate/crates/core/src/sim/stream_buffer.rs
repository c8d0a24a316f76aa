//! Banked, double-buffered feature storage.
//!
//! Element `(c, h, w)` of a `C x H x W` map lives at linear position
//! `i = ((c / C_vec) * H + h) * W + w` in channel lane `c % C_vec`; the bank
//! is `(i % W_vec, c % C_vec)` and the address `i / W_vec`. A stick of
//! `W_vec` consecutive columns by `C_vec` consecutive channels therefore
//! touches every bank exactly once.

use crate::topology::Dims;

#[derive(Debug, Clone)]
struct Half {
    dims: Dims,
    banks: Vec<Vec<f32>>,
    words: Vec<u32>,
}

impl Half {
    fn empty(n_banks: usize) -> Self {
        Half {
            dims: Dims::new(0, 0, 0),
            banks: vec![Vec::new(); n_banks],
            words: vec![0; n_banks],
        }
    }

    fn reset(&mut self, dims: Dims, depth: usize) {
        self.dims = dims;
        for b in &mut self.banks {
            b.clear();
            b.resize(depth, 0.0);
        }
        self.words.fill(0);
    }
}

#[derive(Debug, Clone)]
pub struct StreamBufferArray {
    w_vec: usize,
    c_vec: usize,
    halves: [Half; 2],
    front: usize,
    /// Read-cycle stamp per bank, for conflict detection.
    stamp: Vec<u64>,
    read_cycles: u64,
    read_conflicts: u64,
    back_writes: Vec<u64>,
    peak_words: u32,
}

impl StreamBufferArray {
    pub fn new(w_vec: usize, c_vec: usize) -> Self {
        let n = w_vec * c_vec;
        StreamBufferArray {
            w_vec,
            c_vec,
            halves: [Half::empty(n), Half::empty(n)],
            front: 0,
            stamp: vec![u64::MAX; n],
            read_cycles: 0,
            read_conflicts: 0,
            back_writes: vec![0; n],
            peak_words: 0,
        }
    }

    pub fn banks(&self) -> usize {
        self.w_vec * self.c_vec
    }

    /// Words per bank needed to hold `dims`.
    pub fn depth_for(&self, dims: Dims) -> usize {
        (dims.c.div_ceil(self.c_vec) * dims.h * dims.w).div_ceil(self.w_vec)
    }

    #[inline(always)]
    fn locate(&self, dims: Dims, c: usize, h: usize, w: usize) -> (usize, usize) {
        let i = ((c / self.c_vec) * dims.h + h) * dims.w + w;
        ((i % self.w_vec) * self.c_vec + c % self.c_vec, i / self.w_vec)
    }

    /// Host load of a `C x H x W` map into the front half.
    pub fn load_front(&mut self, dims: Dims, data: &[f32]) {
        assert_eq!(data.len(), dims.volume());
        let depth = self.depth_for(dims);
        let f = self.front;
        self.halves[f].reset(dims, depth);
        let mut idx = 0;
        for c in 0..dims.c {
            for h in 0..dims.h {
                for w in 0..dims.w {
                    let (b, a) = self.locate(dims, c, h, w);
                    let half = &mut self.halves[f];
                    half.banks[b][a] = data[idx];
                    half.words[b] += 1;
                    idx += 1;
                }
            }
        }
        self.note_occupancy();
    }

    pub fn front_dims(&self) -> Dims {
        self.halves[self.front].dims
    }

    /// Prepares the back half to receive a layer's output.
    pub fn begin_output(&mut self, dims: Dims) {
        let depth = self.depth_for(dims);
        let b = 1 - self.front;
        self.halves[b].reset(dims, depth);
        self.back_writes.fill(0);
    }

    /// Crossbar write of one output word into the back half.
    pub fn write_back(&mut self, c: usize, h: usize, w: usize, v: f32) {
        let dims = self.halves[1 - self.front].dims;
        let (b, a) = self.locate(dims, c, h, w);
        let half = &mut self.halves[1 - self.front];
        half.banks[b][a] = v;
        half.words[b] += 1;
        self.back_writes[b] += 1;
        let occ = half.words[b] + self.halves[self.front].words[b];
        self.peak_words = self.peak_words.max(occ);
    }

    /// Largest number of words written to one bank since `begin_output`.
    pub fn max_bank_writes(&self) -> u64 {
        self.back_writes.iter().copied().max().unwrap_or(0)
    }

    pub fn swap(&mut self) {
        self.front = 1 - self.front;
        let back = 1 - self.front;
        self.halves[back].words.fill(0);
    }

    /// Reads one stick from the front half in a single cycle: columns
    /// `col0 .. col0 + W_vec` of row `row`, channels `c0 .. c0 + n_c`.
    /// Positions outside the map read as zero without touching a bank.
    /// `out` is `W_vec x C_vec`, column major by stick column.
    pub fn read_stick(&mut self, c0: usize, n_c: usize, row: isize, col0: isize, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.banks());
        let cycle = self.read_cycles;
        self.read_cycles += 1;
        out.fill(0.0);
        let half = &self.halves[self.front];
        let dims = half.dims;
        if row < 0 || row as usize >= dims.h {
            return;
        }
        for j in 0..self.w_vec {
            let col = col0 + j as isize;
            if col < 0 || col as usize >= dims.w {
                continue;
            }
            for lane in 0..n_c {
                let c = c0 + lane;
                let (b, a) = self.locate(dims, c, row as usize, col as usize);
                if self.stamp[b] == cycle {
                    self.read_conflicts += 1;
                }
                self.stamp[b] = cycle;
                out[j * self.c_vec + lane] = self.halves[self.front].banks[b][a];
            }
        }
    }

    pub fn read_conflicts(&self) -> u64 {
        self.read_conflicts
    }

    /// Peak per-bank occupancy over both halves since the last reset.
    pub fn peak_words(&self) -> u32 {
        self.peak_words
    }

    /// Restarts peak tracking from the current occupancy.
    pub fn reset_peak(&mut self) {
        self.peak_words = 0;
        self.note_occupancy();
    }

    fn note_occupancy(&mut self) {
        let [a, b] = &self.halves;
        let m = a.words.iter().zip(&b.words).map(|(x, y)| x + y).max().unwrap_or(0);
        self.peak_words = self.peak_words.max(m);
    }

    /// The front half as a dense `C x H x W` map.
    pub fn front_tensor(&self) -> Vec<f32> {
        let half = &self.halves[self.front];
        let dims = half.dims;
        let mut out = Vec::with_capacity(dims.volume());
        for c in 0..dims.c {
            for h in 0..dims.h {
                for w in 0..dims.w {
                    let (b, a) = self.locate(dims, c, h, w);
                    out.push(half.banks[b][a]);
                }
            }
        }
        out
    }
}
