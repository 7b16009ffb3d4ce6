//! Sliding-window rate limiter: at most `capacity` acquisitions inside any
//! 60-second window, measured on the tokio clock so tests can run against
//! a paused clock.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use tokio::time::Instant;

const WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug)]
pub struct RateLimiter {
    capacity: u32,
    timestamps: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    /// `capacity == 0` disables limiting.
    pub fn new(capacity: u32) -> Self {
        RateLimiter {
            capacity,
            timestamps: Mutex::new(VecDeque::new()),
        }
    }

    pub async fn acquire(&self) {
        if self.capacity == 0 {
            return;
        }
        loop {
            let wait_until = {
                let mut stamps = self.timestamps.lock().expect("limiter lock");
                let now = Instant::now();
                while stamps
                    .front()
                    .is_some_and(|t| now.duration_since(*t) >= WINDOW)
                {
                    stamps.pop_front();
                }
                if (stamps.len() as u32) < self.capacity {
                    stamps.push_back(now);
                    return;
                }
                *stamps.front().expect("full window") + WINDOW
            };
            tokio::time::sleep_until(wait_until).await;
        }
    }
}
