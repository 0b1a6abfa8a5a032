//! C ABI over the frax solver.
//!
//! All objects are opaque handles created by `frax_*_new`/`frax_flow_solve`
//! and released with the matching `frax_*_free`. Every fallible function
//! returns a [`FraxStatus`]; on failure [`frax_last_error_message`] describes
//! the error of the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use frax::bench::{build_benchmark, line_profile, solve_checked, BenchmarkId, FlowChecks};
use frax::flow::{FlowProblem, FlowSolution, FlowSolver};
use frax::geometry::Point;
use frax::io::Config;
use frax::mesh::CellLocator;
use frax::transport::{run_transport, TransportProblem};
use frax::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FraxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Geometry = 4,
    Mesh = 5,
    Flow = 6,
    Solver = 7,
    Transport = 8,
    Panic = 9,
}

/// Linear solver for the condensed flow system.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FraxSolver {
    Cholesky = 0,
    Cg = 1,
}

/// A flow problem with optional transport data.
pub struct FraxProblem {
    flow: Arc<FlowProblem>,
    transport: Option<TransportProblem>,
}

/// A solved flow field.
pub struct FraxSolution {
    flow: Arc<FlowProblem>,
    solution: FlowSolution,
    checks: FlowChecks,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FraxStatus {
    match e {
        Error::Io(_) | Error::Parse { .. } | Error::MissingGeometryFile(_) => FraxStatus::Io,
        Error::Config(_) | Error::UnknownBenchmark(_) | Error::PointOutsideDomain { .. } | Error::InvalidProblem(_) => {
            FraxStatus::InvalidArgument
        }
        Error::OverlappingFractures { .. }
        | Error::AmbiguousBoundaryPoint { .. }
        | Error::InvalidFracture(_)
        | Error::InvalidBoundary(_) => FraxStatus::Geometry,
        Error::NotFitted { .. } | Error::DegenerateCut { .. } | Error::InvalidMesh(_) => FraxStatus::Mesh,
        Error::SingularTensor { .. } | Error::NoDirichlet => FraxStatus::Flow,
        Error::NotSpd { .. } | Error::NoConvergence { .. } | Error::Singular { .. } => FraxStatus::Solver,
        Error::SingularTransportSystem(_) | Error::InvalidTransport(_) => FraxStatus::Transport,
    }
}

struct Failure(FraxStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FraxStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(FraxStatus::InvalidArgument, message.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FraxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FraxStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {message}"));
            FraxStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next frax call on the same thread.
#[no_mangle]
pub extern "C" fn frax_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn frax_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a built-in benchmark such as `"regular2d-conductive"`.
///
/// # Safety
/// `id` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn frax_benchmark_new(id: *const c_char, level: u32, out: *mut *mut FraxProblem) -> FraxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let id: BenchmarkId = str_arg(id, "id")?.parse()?;
        let b = build_benchmark(id, level as usize)?;
        *out = Box::into_raw(Box::new(FraxProblem { flow: Arc::new(b.flow), transport: b.transport }));
        Ok(())
    })
}

/// Builds a problem from a run configuration file (`[flow]` and optional
/// `[transport]` sections). Relative paths resolve against the file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn frax_problem_from_config(path: *const c_char, out: *mut *mut FraxProblem) -> FraxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let config = Config::load(Path::new(str_arg(path, "path")?))?;
        let (flow, _) = frax::cli::build_flow(&config)?;
        let transport = match config.get("transport", "dt") {
            Some(_) => Some(frax::cli::build_transport(&config, &flow)?),
            None => None,
        };
        *out = Box::into_raw(Box::new(FraxProblem { flow: Arc::new(flow), transport }));
        Ok(())
    })
}

/// # Safety
/// `problem` must come from a frax constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn frax_problem_free(problem: *mut FraxProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// # Safety
/// `problem` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn frax_problem_num_cells(problem: *const FraxProblem, out: *mut usize) -> FraxStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(problem, "problem")?.flow.mesh.num_cells();
        Ok(())
    })
}

/// Solves the flow problem. `cg_tol` is ignored for the direct solver.
///
/// # Safety
/// `problem` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn frax_flow_solve(
    problem: *const FraxProblem,
    solver: FraxSolver,
    cg_tol: f64,
    out: *mut *mut FraxSolution,
) -> FraxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let problem = handle(problem, "problem")?;
        let solver = match solver {
            FraxSolver::Cholesky => FlowSolver::Cholesky,
            FraxSolver::Cg => {
                if !(cg_tol > 0.0) {
                    return Err(invalid("cg_tol must be positive"));
                }
                FlowSolver::Cg { tol: cg_tol, max_iter: 100_000 }
            }
        };
        let (solution, checks) = solve_checked(&problem.flow, solver)?;
        *out = Box::into_raw(Box::new(FraxSolution { flow: problem.flow.clone(), solution, checks }));
        Ok(())
    })
}

/// # Safety
/// `solution` must come from [`frax_flow_solve`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn frax_solution_free(solution: *mut FraxSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// # Safety
/// `solution` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn frax_solution_num_cells(solution: *const FraxSolution, out: *mut usize) -> FraxStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(solution, "solution")?.flow.mesh.num_cells();
        Ok(())
    })
}

/// Number of globally coupled unknowns of the condensed system.
///
/// # Safety
/// `solution` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn frax_solution_num_dofs(solution: *const FraxSolution, out: *mut usize) -> FraxStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(solution, "solution")?.solution.num_dofs;
        Ok(())
    })
}

/// Copies the cell pressures into `buf`, which must hold exactly `len`
/// values with `len` equal to the cell count.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn frax_solution_cell_pressure(solution: *const FraxSolution, buf: *mut f64, len: usize) -> FraxStatus {
    guard(|| {
        let s = handle(solution, "solution")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let p = &s.solution.cell_pressure;
        if len != p.len() {
            return Err(invalid(format!("buffer holds {len} values, the mesh has {} cells", p.len())));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(p);
        Ok(())
    })
}

/// Largest `|∫_∂K u·n − ∫_K f|` over the cells.
///
/// # Safety
/// `solution` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn frax_solution_max_mass_residual(solution: *const FraxSolution, out: *mut f64) -> FraxStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(solution, "solution")?.checks.mass_residual;
        Ok(())
    })
}

/// Postprocessed pressure at `(x, y)`.
///
/// # Safety
/// `solution` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn frax_solution_pressure_at(solution: *const FraxSolution, x: f64, y: f64, out: *mut f64) -> FraxStatus {
    guard(|| {
        let s = handle(solution, "solution")?;
        let out = out_arg(out, "out")?;
        let p = Point::new(x, y);
        let c = CellLocator::new(&s.flow.mesh).locate(&p, 1e-10).ok_or(Error::PointOutsideDomain { x, y })?;
        *out = s.solution.postprocessed[c].eval(&p);
        Ok(())
    })
}

/// Samples the postprocessed pressure at `n ≥ 2` evenly spaced points from
/// `(x0, y0)` to `(x1, y1)`, writing arc lengths to `s` and values to `values`.
///
/// # Safety
/// `s` and `values` must each point to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn frax_solution_pressure_profile(
    solution: *const FraxSolution,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    n: usize,
    s: *mut f64,
    values: *mut f64,
) -> FraxStatus {
    guard(|| {
        let sol = handle(solution, "solution")?;
        if s.is_null() || values.is_null() {
            return Err(null("output buffer"));
        }
        if n < 2 {
            return Err(invalid("a profile needs at least two samples"));
        }
        let post = &sol.solution.postprocessed;
        let rows = line_profile(&sol.flow.mesh, Point::new(x0, y0), Point::new(x1, y1), n, |c, x| post[c].eval(x))?;
        let (s, values) = (std::slice::from_raw_parts_mut(s, n), std::slice::from_raw_parts_mut(values, n));
        for (i, r) in rows.iter().enumerate() {
            s[i] = r.s;
            values[i] = r.value;
        }
        Ok(())
    })
}

/// Runs the problem's transport to its final time on the solved flow and
/// writes the final cell concentrations to `buf` (`len` = cell count).
/// `max_mass_defect` receives the worst relative per-step mass defect and
/// may be null.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn frax_transport_run(
    problem: *const FraxProblem,
    solution: *const FraxSolution,
    buf: *mut f64,
    len: usize,
    max_mass_defect: *mut f64,
) -> FraxStatus {
    guard(|| {
        let problem = handle(problem, "problem")?;
        let sol = handle(solution, "solution")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if !Arc::ptr_eq(&problem.flow, &sol.flow) {
            return Err(invalid("solution was computed for a different problem"));
        }
        let tp = problem.transport.as_ref().ok_or_else(|| invalid("problem has no transport data"))?;
        if len != problem.flow.mesh.num_cells() {
            return Err(invalid(format!("buffer holds {len} values, the mesh has {} cells", problem.flow.mesh.num_cells())));
        }
        let run = run_transport(tp, &problem.flow, &sol.solution, |_| {})?;
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(&run.state.cell);
        if let Some(m) = max_mass_defect.as_mut() {
            *m = run.history.iter().map(|r| r.mass_defect).fold(0.0, f64::max);
        }
        Ok(())
    })
}
