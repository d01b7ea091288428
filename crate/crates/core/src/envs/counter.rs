use super::{EnvError, EnvStepResult, ResetRequest, INVALID_ACTION};

const DEFAULT_TARGET: i64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CounterState {
    counter: i64,
    target: i64,
    done: bool,
}

/// `inc` increments the counter; the empty action reports without mutating.
/// Reward is 1 exactly when the counter equals the target, which also ends
/// the episode. The target comes from `target`, else a numeric `task_id`,
/// else the seed, else 3.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CounterEnv {
    state: Option<CounterState>,
}

impl CounterEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counter(&self) -> Option<i64> {
        self.state.map(|s| s.counter)
    }

    fn state(&self) -> Result<CounterState, EnvError> {
        self.state.ok_or(EnvError::NotReset)
    }

    fn reward(s: &CounterState) -> f64 {
        if s.counter == s.target {
            1.0
        } else {
            0.0
        }
    }

    pub fn reset(&mut self, request: &ResetRequest) -> Result<String, EnvError> {
        let target = match (&request.task_id, request.seed) {
            _ if request.target.is_some() => request.target.unwrap_or(DEFAULT_TARGET),
            (Some(id), _) => id
                .trim()
                .parse::<i64>()
                .map_err(|_| EnvError::UnknownTask(id.clone()))?,
            (None, Some(seed)) => seed as i64,
            (None, None) => DEFAULT_TARGET,
        };
        if target < 0 {
            return Err(EnvError::UnknownTask(target.to_string()));
        }
        self.state = Some(CounterState {
            counter: 0,
            target,
            done: target == 0,
        });
        Ok(format!("Counter: 0. Target: {target}."))
    }

    pub fn step(&mut self, action: &str) -> Result<EnvStepResult, EnvError> {
        let mut s = self.state()?;
        let action = action.trim().to_lowercase();
        if action.is_empty() {
            return Ok(EnvStepResult::new(
                format!("Counter: {}.", s.counter),
                Self::reward(&s),
                s.done,
            ));
        }
        if s.done {
            return Ok(EnvStepResult::new(
                "The episode is already over.",
                Self::reward(&s),
                true,
            ));
        }
        if action != "inc" {
            return Ok(EnvStepResult::new(INVALID_ACTION, Self::reward(&s), false));
        }
        s.counter += 1;
        s.done = s.counter == s.target;
        self.state = Some(s);
        Ok(EnvStepResult::new(
            format!("Counter: {}.", s.counter),
            Self::reward(&s),
            s.done,
        ))
    }

    pub fn admissible_commands(&self) -> Result<Vec<String>, EnvError> {
        let s = self.state()?;
        Ok(if s.done { vec![] } else { vec!["inc".to_string()] })
    }

    pub fn task_objective(&self) -> Result<String, EnvError> {
        let s = self.state()?;
        Ok(format!("Task: increment the counter to {}", s.target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_to_target() {
        let mut env = CounterEnv::new();
        assert_eq!(env.step("inc"), Err(EnvError::NotReset));
        env.reset(&ResetRequest::task("3")).unwrap();
        env.step("inc").unwrap();
        env.step("inc").unwrap();
        let poll = env.step("").unwrap();
        assert_eq!((poll.reward, poll.done), (0.0, false));
        assert_eq!(env.counter(), Some(2));
        let last = env.step("inc").unwrap();
        assert_eq!((last.reward, last.done), (1.0, true));
        assert_eq!(last.info["reward"], 1.0);
        assert_eq!(
            env.step("inc").unwrap().observation,
            "The episode is already over."
        );
        assert_eq!(env.counter(), Some(3));
    }

    #[test]
    fn invalid_and_bad_task() {
        let mut env = CounterEnv::new();
        assert!(matches!(
            env.reset(&ResetRequest::task("abc")),
            Err(EnvError::UnknownTask(_))
        ));
        env.reset(&ResetRequest::default()).unwrap();
        assert_eq!(env.step("jump").unwrap().observation, INVALID_ACTION);
        assert_eq!(env.task_objective().unwrap(), "Task: increment the counter to 3");
    }
}
