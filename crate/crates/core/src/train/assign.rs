use crate::post::BBox;

/// Positive cells kept per ground truth and scale, nearest centers first.
pub const TOP_K: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub class_id: usize,
    /// Pixel coordinates.
    pub bbox: BBox,
}

/// One head scale: stride and grid rows/columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn center(&self, cell: usize) -> (f64, f64) {
        let (i, j) = (cell / self.w, cell % self.w);
        let s = self.stride as f64;
        ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
    }
}

/// The three grids of a square input at strides 8, 16, 32.
pub fn grids_for(image_size: usize) -> [Grid; 3] {
    [8, 16, 32].map(|stride| Grid {
        stride,
        h: image_size / stride,
        w: image_size / stride,
    })
}

/// Cells are numbered scale by scale, row-major within a scale.
pub fn cell_centers(grids: &[Grid]) -> Vec<(f64, f64)> {
    grids
        .iter()
        .flat_map(|g| (0..g.cells()).map(move |c| g.center(c)))
        .collect()
}

/// Target index per cell, or `None` for background.
///
/// At every scale, each target takes the cells whose centers lie strictly
/// inside its box, limited to the [`TOP_K`] nearest to its center (lower
/// cell index on ties). A target that contains no center at any scale
/// takes its single nearest cell. A cell claimed by several targets goes
/// to the smallest box, then the lower target index.
pub fn assign(targets: &[Target], grids: &[Grid]) -> Vec<Option<usize>> {
    let centers = cell_centers(grids);
    let mut owner: Vec<Option<usize>> = vec![None; centers.len()];
    for (ti, t) in targets.iter().enumerate() {
        let (gx, gy) = t.bbox.center();
        let dist = |c: usize| {
            let (x, y) = centers[c];
            (x - gx).powi(2) + (y - gy).powi(2)
        };
        let nearest_first = |a: &usize, b: &usize| dist(*a).total_cmp(&dist(*b)).then(a.cmp(b));
        let mut claimed = Vec::new();
        let mut base = 0;
        for g in grids {
            let mut cand: Vec<usize> = (base..base + g.cells())
                .filter(|&c| t.bbox.contains(centers[c].0, centers[c].1))
                .collect();
            cand.sort_by(nearest_first);
            cand.truncate(TOP_K);
            claimed.extend(cand);
            base += g.cells();
        }
        if claimed.is_empty() {
            claimed = (0..centers.len())
                .min_by(nearest_first)
                .into_iter()
                .collect();
        }
        for c in claimed {
            owner[c] = match owner[c] {
                Some(o) if targets[o].bbox.area() <= t.bbox.area() => Some(o),
                _ => Some(ti),
            };
        }
    }
    owner
}
