use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

/// Requests-per-minute limiter with a one-minute burst.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn per_minute(rpm: u32) -> Self {
        let capacity = f64::from(rpm.max(1));
        Self {
            capacity,
            per_sec: capacity / 60.0,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Takes one token if available, otherwise returns the wait until one is.
    pub fn try_acquire(&self) -> Result<(), Duration> {
        let mut st = self.state.lock().expect("bucket lock");
        let now = Instant::now();
        let refill = now.duration_since(st.1).as_secs_f64() * self.per_sec;
        st.0 = (st.0 + refill).min(self.capacity);
        st.1 = now;
        if st.0 >= 1.0 {
            st.0 -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - st.0) / self.per_sec))
        }
    }

    pub fn acquire(&self) {
        while let Err(wait) = self.try_acquire() {
            thread::sleep(wait);
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().expect("limiter lock");
        while *active >= self.max {
            active = self.freed.wait(active).expect("limiter lock");
        }
        *active += 1;
        InFlightGuard { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.active.lock().expect("limiter lock")
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.limiter.active.lock().expect("limiter lock");
        *active -= 1;
        self.limiter.freed.notify_one();
    }
}
