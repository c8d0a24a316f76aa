//! Double-buffered per-PE filter caches. Every PE holds the filters of the
//! K-tile it is computing in the front half while the next tile's filters
//! arrive in the back half.

/// Cache state shared by all PEs of the chain, which advance in lockstep.
#[derive(Debug, Clone)]
pub struct FilterCacheArray {
    pes: usize,
    /// Words per bank occupied by one tile's filters.
    words_per_tile: usize,
    capacity: usize,
    front: Option<usize>,
    back: Option<usize>,
    peak_words: usize,
    stray_reads: u64,
}

impl FilterCacheArray {
    pub fn new(pes: usize, words_per_tile: usize, capacity: usize) -> Self {
        FilterCacheArray {
            pes,
            words_per_tile,
            capacity,
            front: None,
            back: None,
            peak_words: 0,
            stray_reads: 0,
        }
    }

    pub fn pes(&self) -> usize {
        self.pes
    }

    /// Starts loading `tile` into the back half.
    pub fn prefetch(&mut self, tile: usize) {
        self.back = Some(tile);
        let used = self.words_per_tile * (1 + usize::from(self.front.is_some()));
        self.peak_words = self.peak_words.max(used);
    }

    /// Makes the prefetched tile current.
    pub fn swap(&mut self) {
        self.front = self.back.take();
    }

    /// Records a read of `tile`; only the front half may be read.
    #[inline(always)]
    pub fn read(&mut self, tile: usize) {
        if self.front != Some(tile) {
            self.stray_reads += 1;
        }
    }

    pub fn stray_reads(&self) -> u64 {
        self.stray_reads
    }

    pub fn peak_words(&self) -> usize {
        self.peak_words
    }

    pub fn fits(&self) -> bool {
        self.peak_words <= self.capacity
    }
}
