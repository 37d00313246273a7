use std::sync::{Condvar, Mutex};

/// Counting semaphore bounding concurrent outbound requests.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        InFlightLimit {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().expect("in-flight lock poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("in-flight lock poisoned");
        }
        *n += 1;
        Permit { owner: self }
    }
}

pub struct Permit<'a> {
    owner: &'a InFlightLimit,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.owner.current.lock().expect("in-flight lock poisoned");
        *n -= 1;
        self.owner.freed.notify_one();
    }
}
