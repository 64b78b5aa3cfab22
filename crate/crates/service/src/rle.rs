use serde::{Deserialize, Serialize};

/// Row-major run-length encoding of a label mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    /// `[height, width]`.
    pub shape: [usize; 2],
    /// `(label, run length)` pairs covering every pixel in order.
    pub runs: Vec<(u8, u32)>,
}

impl MaskRle {
    pub fn encode(mask: &[u8], height: usize, width: usize) -> MaskRle {
        assert_eq!(mask.len(), height * width, "mask does not match shape");
        let mut runs: Vec<(u8, u32)> = Vec::new();
        for &v in mask {
            match runs.last_mut() {
                Some((l, n)) if *l == v => *n += 1,
                _ => runs.push((v, 1)),
            }
        }
        MaskRle {
            shape: [height, width],
            runs,
        }
    }

    /// `None` when the runs do not cover the shape exactly.
    pub fn decode(&self) -> Option<Vec<u8>> {
        let total = self.shape[0] * self.shape[1];
        let mut out = Vec::with_capacity(total);
        for &(v, n) in &self.runs {
            if n == 0 || out.len() + n as usize > total {
                return None;
            }
            out.extend(std::iter::repeat_n(v, n as usize));
        }
        (out.len() == total).then_some(out)
    }

    pub fn count(&self, label: u8) -> usize {
        self.runs.iter().filter(|r| r.0 == label).map(|r| r.1 as usize).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_counts() {
        let mask = [0u8, 0, 1, 1, 1, 2, 0, 0, 0];
        let r = MaskRle::encode(&mask, 3, 3);
        assert_eq!(r.runs, vec![(0, 2), (1, 3), (2, 1), (0, 3)]);
        assert_eq!(r.decode().unwrap(), mask);
        assert_eq!((r.count(0), r.count(1), r.count(2), r.count(3)), (5, 3, 1, 0));
    }

    #[test]
    fn decode_rejects_bad_runs() {
        let short = MaskRle { shape: [2, 2], runs: vec![(0, 3)] };
        let long = MaskRle { shape: [2, 2], runs: vec![(0, 5)] };
        let zero = MaskRle { shape: [1, 1], runs: vec![(0, 0), (1, 1)] };
        assert!(short.decode().is_none() && long.decode().is_none() && zero.decode().is_none());
        assert_eq!(MaskRle::encode(&[], 0, 0).decode().unwrap(), Vec::<u8>::new());
    }
}
