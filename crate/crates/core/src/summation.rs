/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// A p×p block of compensated accumulators, stored row-major.
pub(crate) struct CompensatedMatrix {
    p: usize,
    cells: Vec<CompensatedSum>,
}

impl CompensatedMatrix {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            cells: vec![CompensatedSum::default(); p * p],
        }
    }

    /// Adds the outer product `a bᵀ`.
    #[inline]
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        for (r, &ar) in a.iter().enumerate() {
            let row = &mut self.cells[r * self.p..(r + 1) * self.p];
            for (cell, &bc) in row.iter_mut().zip(b) {
                cell.add(ar * bc);
            }
        }
    }

    pub fn to_matrix(&self, scale: f64) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.p, self.p, |r, c| {
            self.cells[r * self.p + c].value() * scale
        })
    }
}
