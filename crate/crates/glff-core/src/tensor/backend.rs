//! Matrix-multiply backend.
//!
//! All heavy math in this crate funnels through [`matmul`] / [`matmul_into`].
//! When a system OpenBLAS is present it is loaded at runtime with `dlopen`,
//! which lets us export `OPENBLAS_CORETYPE` *before* the library initializes.
//! OpenBLAS picks its kernels from CPUID at load time, and hypervisors that
//! mask the CPU model string make it fall back to slow generic kernels even
//! when AVX-512 is available; exporting the core type first avoids that.
//! Without OpenBLAS everything still works through ndarray's built-in
//! matrixmultiply path, just slower.
//!
//! Set `GLFF_NO_OPENBLAS=1` to force the pure-Rust path.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use std::ffi::CString;
use std::os::raw::{c_char, c_double, c_float, c_int, c_void};
use std::sync::OnceLock;

const CBLAS_ROW_MAJOR: c_int = 101;
const CBLAS_NO_TRANS: c_int = 111;
const CBLAS_TRANS: c_int = 112;

type SgemmFn = unsafe extern "C" fn(
    c_int,
    c_int,
    c_int,
    c_int,
    c_int,
    c_int,
    c_float,
    *const c_float,
    c_int,
    *const c_float,
    c_int,
    c_float,
    *mut c_float,
    c_int,
);

type DgemmFn = unsafe extern "C" fn(
    c_int,
    c_int,
    c_int,
    c_int,
    c_int,
    c_int,
    c_double,
    *const c_double,
    c_int,
    *const c_double,
    c_int,
    c_double,
    *mut c_double,
    c_int,
);

type SetNumThreadsFn = unsafe extern "C" fn(c_int);

struct Cblas {
    sgemm: SgemmFn,
    dgemm: DgemmFn,
    /// Present when the library let us pin it to one thread; all
    /// parallelism then belongs to rayon (including row-split GEMMs),
    /// which avoids contention between the two thread pools.
    single_threaded: bool,
}

// The handle from dlopen stays open for the process lifetime.
unsafe impl Send for Cblas {}
unsafe impl Sync for Cblas {}

static CBLAS: OnceLock<Option<Cblas>> = OnceLock::new();

/// Large tensor temporaries churn through glibc's mmap/munmap path by
/// default, and the page faults end up costing more than the math. Keep
/// big blocks in the arena unless the user tuned malloc themselves.
#[cfg(target_os = "linux")]
fn tune_allocator() {
    if std::env::var_os("MALLOC_MMAP_THRESHOLD_").is_some()
        || std::env::var_os("MALLOC_TRIM_THRESHOLD_").is_some()
    {
        return;
    }
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

#[cfg(not(target_os = "linux"))]
fn tune_allocator() {}

fn load_cblas() -> Option<Cblas> {
    tune_allocator();
    if std::env::var_os("GLFF_NO_OPENBLAS").is_some() {
        return None;
    }
    if std::env::var_os("OPENBLAS_CORETYPE").is_none() && is_x86_feature_detected!("avx512f") {
        // Guarded workaround for masked CPUID under hypervisors; see module docs.
        std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
    }
    for name in ["libopenblas.so.0", "libopenblas.so", "libopenblas.dylib"] {
        let c_name = CString::new(name).unwrap();
        let handle = unsafe { libc::dlopen(c_name.as_ptr(), libc::RTLD_NOW | libc::RTLD_LOCAL) };
        if handle.is_null() {
            continue;
        }
        let sym = |s: &str| -> *mut c_void {
            let c_sym = CString::new(s).unwrap();
            unsafe { libc::dlsym(handle, c_sym.as_ptr() as *const c_char) }
        };
        let sgemm = sym("cblas_sgemm");
        let dgemm = sym("cblas_dgemm");
        if sgemm.is_null() || dgemm.is_null() {
            unsafe { libc::dlclose(handle) };
            continue;
        }
        let set_threads = sym("openblas_set_num_threads");
        let single_threaded = if set_threads.is_null() {
            false
        } else {
            unsafe {
                let f = std::mem::transmute::<*mut c_void, SetNumThreadsFn>(set_threads);
                f(1);
            }
            true
        };
        log::debug!("matmul backend: OpenBLAS via {name} (single_threaded={single_threaded})");
        return Some(Cblas {
            sgemm: unsafe { std::mem::transmute::<*mut c_void, SgemmFn>(sgemm) },
            dgemm: unsafe { std::mem::transmute::<*mut c_void, DgemmFn>(dgemm) },
            single_threaded,
        });
    }
    log::debug!("matmul backend: matrixmultiply fallback");
    None
}

fn cblas() -> Option<&'static Cblas> {
    CBLAS.get_or_init(load_cblas).as_ref()
}

/// Element type usable in tensors: `f32` for production, `f64` for
/// finite-difference verification.
pub trait Elem:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite literal")
    }
    fn as_f64(self) -> f64;

    /// Row-major `c = alpha * a(ta) * b(tb) + beta * c`.
    ///
    /// # Safety
    /// `a`, `b` and `c` must cover `(rows-1)*ld + cols` elements for their
    /// respective operand shapes, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_blas(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: *const Self,
        lda: usize,
        b: *const Self,
        ldb: usize,
        beta: Self,
        c: *mut Self,
        ldc: usize,
    ) -> bool;
}

impl Elem for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_blas(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: *const Self,
        lda: usize,
        b: *const Self,
        ldb: usize,
        beta: Self,
        c: *mut Self,
        ldc: usize,
    ) -> bool {
        let Some(f) = cblas() else { return false };
        (f.sgemm)(
            CBLAS_ROW_MAJOR,
            if ta { CBLAS_TRANS } else { CBLAS_NO_TRANS },
            if tb { CBLAS_TRANS } else { CBLAS_NO_TRANS },
            m as c_int,
            n as c_int,
            k as c_int,
            alpha,
            a,
            lda as c_int,
            b,
            ldb as c_int,
            beta,
            c,
            ldc as c_int,
        );
        true
    }
}

impl Elem for f64 {
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_blas(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: *const Self,
        lda: usize,
        b: *const Self,
        ldb: usize,
        beta: Self,
        c: *mut Self,
        ldc: usize,
    ) -> bool {
        let Some(f) = cblas() else { return false };
        (f.dgemm)(
            CBLAS_ROW_MAJOR,
            if ta { CBLAS_TRANS } else { CBLAS_NO_TRANS },
            if tb { CBLAS_TRANS } else { CBLAS_NO_TRANS },
            m as c_int,
            n as c_int,
            k as c_int,
            alpha,
            a,
            lda as c_int,
            b,
            ldb as c_int,
            beta,
            c,
            ldc as c_int,
        );
        true
    }
}

/// A view is BLAS-usable when it is row-major (possibly with a wider
/// leading dimension, as for column slices of a packed matrix) or the
/// transpose of such a view.
enum Layout<F: Elem> {
    Normal(*const F, usize),
    Transposed(*const F, usize),
}

fn classify<F: Elem>(v: &ArrayView2<'_, F>) -> Option<Layout<F>> {
    let (rows, cols) = v.dim();
    let s = v.strides();
    if s[1] == 1 && s[0] >= cols as isize {
        Some(Layout::Normal(v.as_ptr(), s[0] as usize))
    } else if s[0] == 1 && s[1] >= rows as isize {
        Some(Layout::Transposed(v.as_ptr(), s[1] as usize))
    } else {
        None
    }
}

/// `c = alpha * a . b + beta * c`.
pub fn matmul_into<F: Elem>(
    c: &mut ArrayViewMut2<'_, F>,
    a: ArrayView2<'_, F>,
    b: ArrayView2<'_, F>,
    alpha: F,
    beta: F,
) {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "matmul shape mismatch: {m}x{ka} . {kb}x{n}");
    assert_eq!(c.dim(), (m, n), "matmul output shape mismatch");

    let mut _a_owned = None;
    let mut _b_owned = None;
    let a_view = match classify(&a) {
        Some(l) => l,
        None => {
            let owned = a.to_owned();
            let ptr = owned.as_ptr();
            _a_owned = Some(owned);
            Layout::Normal(ptr, ka)
        }
    };
    let b_view = match classify(&b) {
        Some(l) => l,
        None => {
            let owned = b.to_owned();
            let ptr = owned.as_ptr();
            _b_owned = Some(owned);
            Layout::Normal(ptr, n)
        }
    };

    // Tiny products lose more to BLAS call/threading overhead than the
    // multiply costs; route them through the in-process kernel.
    let small = m * n * ka < 1 << 19;

    let c_strided = {
        let cs = c.strides();
        if cs[1] == 1 && cs[0] >= n as isize {
            Some(cs[0] as usize)
        } else {
            None
        }
    };
    if let (false, Some(ldc)) = (small, c_strided) {
        let (ta, lda) = match a_view {
            Layout::Normal(_, ld) => (false, ld),
            Layout::Transposed(_, ld) => (true, ld),
        };
        let (tb, ldb) = match b_view {
            Layout::Normal(_, ld) => (false, ld),
            Layout::Transposed(_, ld) => (true, ld),
        };
        let c_ptr = SendPtr(c.as_mut_ptr());
        let a_ptr = SendConstPtr(match a_view {
            Layout::Normal(p, _) | Layout::Transposed(p, _) => p,
        });
        let b_ptr = SendConstPtr(match b_view {
            Layout::Normal(p, _) | Layout::Transposed(p, _) => p,
        });

        // Split large products across rayon workers: tall ones by rows of A,
        // wide ones by columns of B. Each half sums its output elements in
        // the same order, so results do not depend on the thread count.
        let parallel = blas_is_single_threaded() && rayon::current_num_threads() > 1;
        let (ap, bp, cp) = (&a_ptr, &b_ptr, &c_ptr);
        if parallel && !ta && m >= 512 {
            let m_half = m / 2;
            // SAFETY: the two row blocks of A and C are disjoint.
            let (ok_lo, ok_hi) = rayon::join(
                || unsafe {
                    F::gemm_blas(false, tb, m_half, n, ka, alpha, ap.0, lda, bp.0, ldb, beta, cp.0, ldc)
                },
                || unsafe {
                    F::gemm_blas(
                        false,
                        tb,
                        m - m_half,
                        n,
                        ka,
                        alpha,
                        ap.0.add(m_half * lda),
                        lda,
                        bp.0,
                        ldb,
                        beta,
                        cp.0.add(m_half * ldc),
                        ldc,
                    )
                },
            );
            if ok_lo && ok_hi {
                return;
            }
        } else if parallel && !tb && n >= 1024 {
            let n_half = n / 2;
            // SAFETY: the two column blocks of B and C are disjoint element
            // sets; each call stays within its block under its ld stride.
            let (ok_lo, ok_hi) = rayon::join(
                || unsafe {
                    F::gemm_blas(ta, false, m, n_half, ka, alpha, ap.0, lda, bp.0, ldb, beta, cp.0, ldc)
                },
                || unsafe {
                    F::gemm_blas(
                        ta,
                        false,
                        m,
                        n - n_half,
                        ka,
                        alpha,
                        ap.0,
                        lda,
                        bp.0.add(n_half),
                        ldb,
                        beta,
                        cp.0.add(n_half),
                        ldc,
                    )
                },
            );
            if ok_lo && ok_hi {
                return;
            }
        } else if unsafe { F::gemm_blas(ta, tb, m, n, ka, alpha, ap.0, lda, bp.0, ldb, beta, cp.0, ldc) } {
            return;
        }
    }
    // Pure-Rust fallback (also covers non-BLAS-compatible layouts).
    ndarray::linalg::general_mat_mul(alpha, &a, &b, beta, c);
}

struct SendPtr<F>(*mut F);
unsafe impl<F> Send for SendPtr<F> {}
unsafe impl<F> Sync for SendPtr<F> {}

struct SendConstPtr<F>(*const F);
unsafe impl<F> Send for SendConstPtr<F> {}
unsafe impl<F> Sync for SendConstPtr<F> {}

fn blas_is_single_threaded() -> bool {
    CBLAS
        .get()
        .and_then(|c| c.as_ref())
        .is_some_and(|c| c.single_threaded)
}

/// `a . b` into a freshly allocated array.
pub fn matmul<F: Elem>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    let (m, _) = a.dim();
    let (_, n) = b.dim();
    let mut c = Array2::<F>::zeros((m, n));
    matmul_into(&mut c.view_mut(), a, b, F::one(), F::zero());
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn naive<F: Elem>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
        let (m, k) = a.dim();
        let (_, n) = b.dim();
        let mut c = Array2::<F>::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                let mut acc = F::zero();
                for l in 0..k {
                    acc = acc + a[[i, l]] * b[[l, j]];
                }
                c[[i, j]] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive_f32() {
        let a = Array2::from_shape_fn((17, 23), |(i, j)| ((i * 31 + j * 7) % 13) as f32 * 0.25 - 1.0);
        let b = Array2::from_shape_fn((23, 11), |(i, j)| ((i * 5 + j * 17) % 19) as f32 * 0.125 - 1.0);
        let c = matmul(a.view(), b.view());
        let expect = naive(&a, &b);
        for (x, y) in c.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_transposed_views() {
        let a = Array2::from_shape_fn((9, 14), |(i, j)| (i as f64) - 0.5 * j as f64);
        let b = Array2::from_shape_fn((9, 6), |(i, j)| (j as f64) * 0.3 - i as f64 * 0.1);
        // aᵀ . b through transposed views must equal the naive product.
        let c = matmul(a.t(), b.view());
        let expect = naive(&a.t().to_owned(), &b);
        for (x, y) in c.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn matmul_on_column_slices() {
        // column slices of a packed matrix carry a wider leading dimension
        let big_a = Array2::from_shape_fn((70, 96), |(i, j)| ((i * 7 + j) % 23) as f32 * 0.1 - 1.0);
        let big_b = Array2::from_shape_fn((70, 96), |(i, j)| ((i * 3 + j * 5) % 17) as f32 * 0.1 - 0.5);
        let a = big_a.slice(ndarray::s![.., 32..64]);
        let b = big_b.slice(ndarray::s![.., 32..64]);
        let got = matmul(a, b.t());
        let expect = naive(&a.to_owned(), &b.t().to_owned());
        for (x, y) in got.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
        // strided output region
        let mut big_c = Array2::<f32>::zeros((70, 96));
        {
            let mut cview = big_c.slice_mut(ndarray::s![.., 10..80]);
            matmul_into(&mut cview, a, b.t(), 1.0, 0.0);
        }
        for (x, y) in big_c.slice(ndarray::s![.., 10..80]).iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-3);
        }
        assert!(big_c.slice(ndarray::s![.., 0..10]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_into_accumulates() {
        let a = array![[1.0f32, 2.0], [3.0, 4.0]];
        let b = array![[1.0f32, 0.0], [0.0, 1.0]];
        let mut c = array![[10.0f32, 10.0], [10.0, 10.0]];
        matmul_into(&mut c.view_mut(), a.view(), b.view(), 2.0, 1.0);
        assert_eq!(c, array![[12.0, 14.0], [16.0, 18.0]]);
    }
}
