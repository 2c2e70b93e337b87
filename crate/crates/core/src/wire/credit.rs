use super::WireError;

pub const DEFAULT_CREDIT_WINDOW: u32 = 64;

/// Packet credits a sender holds for one queue pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CreditState {
    pub available: u32,
    pub max: u32,
}

/// Returned by [`CreditState::consume`] when no credit is left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WouldBlock;

impl CreditState {
    pub fn full(max: u32) -> Self {
        CreditState { available: max, max }
    }

    pub fn in_flight(&self) -> u32 {
        self.max - self.available
    }

    pub fn consume(self) -> Result<CreditState, WouldBlock> {
        if self.available == 0 {
            return Err(WouldBlock);
        }
        Ok(CreditState {
            available: self.available - 1,
            ..self
        })
    }

    pub fn grant(self, n: u32) -> Result<CreditState, WireError> {
        match self.available.checked_add(n) {
            Some(a) if a <= self.max => Ok(CreditState { available: a, ..self }),
            _ => Err(WireError::Protocol(format!(
                "grant of {n} with {} of {} available",
                self.available, self.max
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    #[test]
    fn consume_to_zero_then_block() {
        let c = CreditState { available: 1, max: 4 };
        let c = c.consume().unwrap();
        assert_eq!(c.available, 0);
        assert_eq!(c.consume(), Err(WouldBlock));
    }

    #[test]
    fn grant_full_window_and_over_grant() {
        let c = CreditState { available: 0, max: 8 };
        assert_eq!(c.grant(8).unwrap().available, 8);
        assert!(c.grant(9).is_err());
        assert!(CreditState::full(8).grant(1).is_err());
    }

    #[test]
    fn simulated_window_never_exceeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let window = 8;
        let mut credits = CreditState::full(window);
        let mut wire: VecDeque<u32> = VecDeque::new();
        let mut unacked_at_receiver = 0u32;
        let mut sent = 0u32;
        let mut max_in_flight = 0;
        while sent < 20_000 {
            if rng.gen_bool(0.6) {
                if let Ok(c) = credits.consume() {
                    credits = c;
                    wire.push_back(sent);
                    sent += 1;
                }
            } else if wire.pop_front().is_some() {
                unacked_at_receiver += 1;
                if unacked_at_receiver >= window / 2 || rng.gen_bool(0.1) {
                    credits = credits.grant(unacked_at_receiver).unwrap();
                    unacked_at_receiver = 0;
                }
            }
            let in_flight = wire.len() as u32 + unacked_at_receiver;
            assert_eq!(in_flight, credits.in_flight());
            max_in_flight = max_in_flight.max(in_flight);
        }
        assert!(max_in_flight <= window);
        assert_eq!(max_in_flight, window);
    }
}
