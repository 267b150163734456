//! Coarse guidance masks and their projections onto feature-map grids.

pub const DEFAULT_CELL_SIZE: usize = 32;

/// Boolean grid at 1/cell_size input resolution; one cell covers one
/// cell_size x cell_size block of input pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidanceMask {
    h: usize,
    w: usize,
    cell_size: usize,
    cells: Vec<bool>,
}

impl GuidanceMask {
    pub fn new_false(h: usize, w: usize, cell_size: usize) -> Self {
        GuidanceMask {
            h,
            w,
            cell_size,
            cells: vec![false; h * w],
        }
    }

    pub fn new_true(h: usize, w: usize, cell_size: usize) -> Self {
        GuidanceMask {
            h,
            w,
            cell_size,
            cells: vec![true; h * w],
        }
    }

    /// Grid size covering an image: ceil(dim / cell_size).
    pub fn grid_for_image(image_h: usize, image_w: usize, cell_size: usize) -> (usize, usize) {
        (
            (image_h + cell_size - 1) / cell_size,
            (image_w + cell_size - 1) / cell_size,
        )
    }

    pub fn from_cells(h: usize, w: usize, cell_size: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), h * w, "cell count must match grid dims");
        GuidanceMask {
            h,
            w,
            cell_size,
            cells,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn cell_size(&self) -> usize {
        self.cell_size
    }
    #[inline]
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
    #[inline]
    pub fn cells_mut(&mut self) -> &mut [bool] {
        &mut self.cells
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.cells[y * self.w + x] = v;
    }

    pub fn true_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Fraction of true cells in [0, 1].
    pub fn area_ratio(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.true_count() as f64 / self.cells.len() as f64
    }

    /// Cell-wise union; grids must agree in shape.
    pub fn union(&self, other: &GuidanceMask) -> GuidanceMask {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(&a, &b)| a || b)
            .collect();
        GuidanceMask::from_cells(self.h, self.w, self.cell_size, cells)
    }

    pub fn contains(&self, other: &GuidanceMask) -> bool {
        self.cells
            .iter()
            .zip(&other.cells)
            .all(|(&a, &b)| a || !b)
    }
}

/// A guidance mask projected onto a feature map of a specific resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskView {
    h: usize,
    w: usize,
    /// Approximate input-pixels-per-feature-cell of the source projection;
    /// informational, 0 when constructed directly from a grid.
    source_stride: u32,
    cells: Vec<bool>,
}

impl MaskView {
    pub fn full(h: usize, w: usize) -> Self {
        MaskView {
            h,
            w,
            source_stride: 0,
            cells: vec![true; h * w],
        }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        MaskView {
            h,
            w,
            source_stride: 0,
            cells: vec![false; h * w],
        }
    }

    pub fn from_cells(h: usize, w: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), h * w, "cell count must match view dims");
        MaskView {
            h,
            w,
            source_stride: 0,
            cells,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn source_stride(&self) -> u32 {
        self.source_stride
    }
    #[inline]
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.w + x]
    }

    pub fn true_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn area_ratio(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.true_count() as f64 / self.cells.len() as f64
    }

    /// True locations in row-major (y, x) order; the row order of the guided
    /// im2col matrix.
    pub fn true_locations(&self) -> Vec<(u32, u32)> {
        let mut locs = Vec::with_capacity(self.true_count());
        for y in 0..self.h {
            for x in 0..self.w {
                if self.cells[y * self.w + x] {
                    locs.push((y as u32, x as u32));
                }
            }
        }
        locs
    }
}

/// Project a guidance mask onto a (feature_h, feature_w) grid: each feature
/// cell maps through its input-pixel center to the mask cell under it.
pub fn mask_project(
    mask: &GuidanceMask,
    feature_h: usize,
    feature_w: usize,
    image_h: usize,
    image_w: usize,
) -> MaskView {
    let stride_y = image_h as f64 / feature_h as f64;
    let stride_x = image_w as f64 / feature_w as f64;
    let cell = mask.cell_size() as f64;
    let mut cells = vec![false; feature_h * feature_w];
    for fy in 0..feature_h {
        let center_y = (fy as f64 + 0.5) * stride_y;
        let my = ((center_y / cell).floor() as usize).min(mask.height() - 1);
        for fx in 0..feature_w {
            let center_x = (fx as f64 + 0.5) * stride_x;
            let mx = ((center_x / cell).floor() as usize).min(mask.width() - 1);
            cells[fy * feature_w + fx] = mask.get(my, mx);
        }
    }
    MaskView {
        h: feature_h,
        w: feature_w,
        source_stride: ((stride_y + stride_x) * 0.5).round() as u32,
        cells,
    }
}

/// Grow true cells by a Chebyshev-distance radius.
pub fn mask_dilate(view: &MaskView, radius: usize) -> MaskView {
    if radius == 0 {
        return view.clone();
    }
    let (h, w) = (view.h, view.w);
    // horizontal pass then vertical pass
    let mut horiz = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let x0 = x.saturating_sub(radius);
            let x1 = (x + radius).min(w.saturating_sub(1));
            horiz[y * w + x] = (x0..=x1).any(|xx| view.cells[y * w + xx]);
        }
    }
    let mut cells = vec![false; h * w];
    for y in 0..h {
        let y0 = y.saturating_sub(radius);
        let y1 = (y + radius).min(h.saturating_sub(1));
        for x in 0..w {
            cells[y * w + x] = (y0..=y1).any(|yy| horiz[yy * w + x]);
        }
    }
    MaskView {
        h,
        w,
        source_stride: view.source_stride,
        cells,
    }
}
