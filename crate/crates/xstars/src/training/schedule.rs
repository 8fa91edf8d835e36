//! Per-step schedules: linear warmup followed by a half-cosine decay, and the
//! linear teacher-temperature warmup.

/// Linear warmup from `start_warmup` to `base` over `warmup_steps`, then
/// cosine decay from `base` to `end` over the remaining steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub end: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub start_warmup: f64,
}

impl CosineSchedule {
    pub fn new(base: f64, end: f64, total_steps: usize) -> Self {
        Self {
            base,
            end,
            total_steps,
            warmup_steps: 0,
            start_warmup: 0.0,
        }
    }

    pub fn with_warmup(mut self, warmup_steps: usize, start_warmup: f64) -> Self {
        self.warmup_steps = warmup_steps.min(self.total_steps);
        self.start_warmup = start_warmup;
        self
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.start_warmup + (self.base - self.start_warmup) * frac;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps);
        if decay == 0 {
            return self.end;
        }
        let i = (step - self.warmup_steps).min(decay) as f64;
        self.end + 0.5 * (self.base - self.end) * (1.0 + (std::f64::consts::PI * i / decay as f64).cos())
    }
}

/// Teacher temperature: linear from `warmup` to `target` over
/// `warmup_epochs`, then constant.
pub fn teacher_temperature(epoch: usize, warmup: f64, target: f64, warmup_epochs: usize) -> f64 {
    if epoch >= warmup_epochs || warmup_epochs == 0 {
        return target;
    }
    if warmup_epochs == 1 {
        return warmup;
    }
    warmup + (target - warmup) * epoch as f64 / (warmup_epochs - 1) as f64
}
