//! Axis-aligned bounding boxes, shared by the synthetic generator and the
//! instance-placement collision tests.

/// Axis-aligned bounding box in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    /// Smallest box containing all points; `None` on an empty iterator.
    pub fn from_points<I: IntoIterator<Item = [f64; 3]>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut bb = Aabb::new(first, first);
        for p in it {
            for a in 0..3 {
                bb.min[a] = bb.min[a].min(p[a]);
                bb.max[a] = bb.max[a].max(p[a]);
            }
        }
        Some(bb)
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    /// Volume of the intersection; 0 for disjoint or merely touching boxes.
    pub fn intersection_volume(&self, other: &Aabb) -> f64 {
        let mut v = 1.0;
        for a in 0..3 {
            let lo = self.min[a].max(other.min[a]);
            let hi = self.max[a].min(other.max[a]);
            if hi <= lo {
                return 0.0;
            }
            v *= hi - lo;
        }
        v
    }

    /// True iff the boxes overlap with positive volume. Face contact is not
    /// a collision.
    pub fn collides(&self, other: &Aabb) -> bool {
        self.intersection_volume(other) > 0.0
    }

    pub fn translated(&self, t: [f64; 3]) -> Aabb {
        Aabb::new(
            [self.min[0] + t[0], self.min[1] + t[1], self.min[2] + t[2]],
            [self.max[0] + t[0], self.max[1] + t[1], self.max[2] + t[2]],
        )
    }
}
