use crate::error::Result;

use super::config::ModelConfig;

/// One run of a distinct layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Application {
    pub layer: usize,
    /// 0-based cycle; head and tail layers run in cycle 0.
    pub cycle: usize,
    /// Position of `layer` within the cycled block, if it cycles.
    pub cycled_slot: Option<usize>,
}

/// Ordered layer applications plus the points where an exit may fire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleSchedule {
    pub applications: Vec<Application>,
    /// Application index after which each cycle ends, one per cycle. The last
    /// entry corresponds to the model's final output.
    pub exit_points: Vec<usize>,
    /// Whether exits pass through the tail layer before the LM head.
    pub exits_through_tail: bool,
}

impl CycleSchedule {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let l = config.all_layers;
        let n = config.loop_count;
        let cycled = config.cycled_layers();
        let mut applications = Vec::with_capacity(config.effective_depth());
        let mut exit_points = Vec::with_capacity(n);

        let through_tail = config.variant.decouples_head_tail();
        let prefix = 0..cycled.start;
        let suffix = cycled.end..l;
        for layer in prefix {
            applications.push(Application { layer, cycle: 0, cycled_slot: None });
        }
        for cycle in 0..n {
            for (slot, layer) in cycled.clone().enumerate() {
                applications.push(Application { layer, cycle, cycled_slot: Some(slot) });
            }
            if through_tail {
                exit_points.push(applications.len() - 1);
            }
        }
        for layer in suffix {
            applications.push(Application { layer, cycle: 0, cycled_slot: None });
        }
        if !through_tail {
            if cycled.is_empty() {
                exit_points.push(applications.len() - 1);
            } else {
                let per_cycle = cycled.len();
                exit_points = (0..n).map(|c| (c + 1) * per_cycle - 1).collect();
            }
        }
        Ok(Self { applications, exit_points, exits_through_tail: through_tail })
    }

    pub fn len(&self) -> usize {
        self.applications.len()
    }

    pub fn is_empty(&self) -> bool {
        self.applications.is_empty()
    }

    /// Distinct layer index of each application.
    pub fn layers(&self) -> Vec<usize> {
        self.applications.iter().map(|a| a.layer).collect()
    }

    pub fn cycled_applications(&self) -> impl Iterator<Item = &Application> {
        self.applications.iter().filter(|a| a.cycled_slot.is_some())
    }

    /// Index of the tail application when exits route through it.
    pub fn tail_index(&self) -> Option<usize> {
        self.exits_through_tail.then(|| self.applications.len() - 1)
    }
}
