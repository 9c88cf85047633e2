//! Python bindings for the DNUT engine.
//!
//! Structured results (load flows, reports, trade logs) cross the boundary as
//! JSON and come back as plain dicts and lists.

use std::path::PathBuf;
use std::sync::OnceLock;

use dnut_core::feeder::{load_feeder_dir, FeederOptions};
use dnut_core::market::{replay, FlowMode, Market, MarketConfig, OrderRequest};
use dnut_core::power_flow::solve;
use dnut_core::scenario::load_scenario;
use dnut_core::sensitivity::{self, SensitivityMatrices};
use dnut_core::simulation::{
    ppr_grid, run_case1, run_case2, run_case3, run_single, scale_grid, sr_grid, SimulationConfig, TrackedPairs,
};
use dnut_core::tariff::{
    self, build_matrix, mean_abs_off_diagonal, tune_constants, Component, DnutEvaluator, MixedSignRule,
};
use dnut_core::{BaseCase, Network};
use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};
use serde::Serialize;

fn err(e: dnut_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let loads = PyModule::import(py, "json")?.getattr("loads")?;
    Ok(loads.call1((text,))?.unbind())
}

fn from_py<T: for<'de> serde::Deserialize<'de>>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let dumps = PyModule::import(py, "json")?.getattr("dumps")?;
    let text: String = dumps.call1((value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Simulation settings from keyword arguments layered over the defaults.
fn config_from(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<SimulationConfig> {
    let config: SimulationConfig = match kwargs {
        Some(k) => from_py(py, k.as_any())?,
        None => SimulationConfig::default(),
    };
    config.validate().map_err(err)?;
    Ok(config)
}

/// Tariff constants. Defaults to the reference values.
#[pyclass(name = "TariffConstants", module = "dnut", from_py_object)]
#[derive(Clone, Copy, Default)]
struct PyConstants {
    inner: tariff::TariffConstants,
}

#[pymethods]
impl PyConstants {
    #[new]
    #[pyo3(signature = (c_i_limit=None, c_i_linear=None, c_u_limit=None, c_u_linear=None, c_loss=None, mixed_sign=None))]
    fn new(
        c_i_limit: Option<f64>,
        c_i_linear: Option<f64>,
        c_u_limit: Option<f64>,
        c_u_linear: Option<f64>,
        c_loss: Option<f64>,
        mixed_sign: Option<&str>,
    ) -> PyResult<Self> {
        let mut c = tariff::TariffConstants::default();
        c.c_i_limit = c_i_limit.unwrap_or(c.c_i_limit);
        c.c_i_linear = c_i_linear.unwrap_or(c.c_i_linear);
        c.c_u_limit = c_u_limit.unwrap_or(c.c_u_limit);
        c.c_u_linear = c_u_linear.unwrap_or(c.c_u_linear);
        c.c_loss = c_loss.unwrap_or(c.c_loss);
        c.mixed_sign = match mixed_sign {
            None | Some("literal") => MixedSignRule::Literal,
            Some("magnitude_change") => MixedSignRule::MagnitudeChange,
            Some(other) => return Err(PyValueError::new_err(format!("unknown mixed-sign rule {other:?}"))),
        };
        c.validate().map_err(err)?;
        Ok(PyConstants { inner: c })
    }

    #[staticmethod]
    fn unit() -> Self {
        PyConstants {
            inner: tariff::TariffConstants::unit(),
        }
    }

    #[getter]
    fn c_i_limit(&self) -> f64 {
        self.inner.c_i_limit
    }

    #[getter]
    fn c_i_linear(&self) -> f64 {
        self.inner.c_i_linear
    }

    #[getter]
    fn c_u_limit(&self) -> f64 {
        self.inner.c_u_limit
    }

    #[getter]
    fn c_u_linear(&self) -> f64 {
        self.inner.c_u_linear
    }

    #[getter]
    fn c_loss(&self) -> f64 {
        self.inner.c_loss
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "TariffConstants(c_i_limit={}, c_i_linear={:e}, c_u_limit={}, c_u_linear={:e}, c_loss={})",
            c.c_i_limit, c.c_i_linear, c.c_u_limit, c.c_u_linear, c.c_loss
        )
    }
}

/// A feeder with its base-case injections. Sensitivities are built on first use.
#[pyclass(name = "Network", module = "dnut", frozen)]
struct PyNetwork {
    network: Network,
    base_case: BaseCase,
    matrices: OnceLock<SensitivityMatrices>,
}

impl PyNetwork {
    fn matrices(&self, py: Python<'_>) -> PyResult<&SensitivityMatrices> {
        if let Some(m) = self.matrices.get() {
            return Ok(m);
        }
        let built = py.detach(|| sensitivity::build(&self.network, &self.base_case)).map_err(err)?;
        Ok(self.matrices.get_or_init(|| built))
    }

    fn index(&self, name: &str) -> PyResult<usize> {
        self.network
            .prosumer_index(name)
            .ok_or_else(|| PyKeyError::new_err(name.to_string()))
    }
}

#[pymethods]
impl PyNetwork {
    /// Loads a feeder directory (Lines.csv, LineCodes.csv, Loads.csv, Buscoords.csv).
    #[staticmethod]
    fn from_feeder(dir: PathBuf) -> PyResult<Self> {
        let network = load_feeder_dir(&dir, &FeederOptions::default()).map_err(err)?;
        let base_case = BaseCase::from_network(&network);
        Ok(PyNetwork {
            network,
            base_case,
            matrices: OnceLock::new(),
        })
    }

    /// Loads a JSON scenario file.
    #[staticmethod]
    fn from_scenario(path: PathBuf) -> PyResult<Self> {
        let (network, base_case) = load_scenario(&path).map_err(err)?;
        Ok(PyNetwork {
            network,
            base_case,
            matrices: OnceLock::new(),
        })
    }

    #[getter]
    fn prosumers(&self) -> Vec<String> {
        self.network.prosumers().iter().map(|p| p.name.clone()).collect()
    }

    #[getter]
    fn buses(&self) -> Vec<String> {
        self.network.buses().iter().map(|b| b.id.clone()).collect()
    }

    #[getter]
    fn n_branches(&self) -> usize {
        self.network.nb()
    }

    /// Exact load flow of the base case as magnitudes (volts, signed amps, watts).
    fn power_flow(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let state = py.detach(|| solve(&self.network, self.base_case.injections())).map_err(err)?;
        to_py(py, &state.magnitudes())
    }

    /// Voltage sensitivity matrix, volts per MWh, rows `3 * bus + phase`.
    fn voltage_sensitivities(&self, py: Python<'_>) -> PyResult<Vec<Vec<f64>>> {
        let vsf = &self.matrices(py)?.vsf;
        Ok((0..vsf.rows())
            .map(|r| (0..vsf.cols()).map(|c| vsf.get(r, c)).collect())
            .collect())
    }

    /// Current sensitivity matrix, amps per MWh, rows `3 * branch + phase`.
    fn current_sensitivities(&self, py: Python<'_>) -> PyResult<Vec<Vec<f64>>> {
        let csf = &self.matrices(py)?.csf;
        Ok((0..csf.rows())
            .map(|r| (0..csf.cols()).map(|c| csf.get(r, c)).collect())
            .collect())
    }

    /// DNUT in EUR/MWh for one supplier/consumer pair, with the charge breakdown in EUR.
    #[pyo3(signature = (supplier, consumer, energy=4e-4, constants=None))]
    fn dnut(
        &self,
        py: Python<'_>,
        supplier: &str,
        consumer: &str,
        energy: f64,
        constants: Option<PyConstants>,
    ) -> PyResult<(f64, Py<PyAny>)> {
        let (s, d) = (self.index(supplier)?, self.index(consumer)?);
        let matrices = self.matrices(py)?;
        let ev = DnutEvaluator::at_base(&self.network, matrices, constants.unwrap_or_default().inner);
        let (value, breakdown) = ev.pair(s, d, energy).map_err(err)?;
        Ok((value, to_py(py, &breakdown)?))
    }

    /// Full DNUT matrix with its current, voltage and loss parts, `[supplier][consumer]`.
    #[pyo3(signature = (energy=4e-4, constants=None))]
    fn dnut_matrix(&self, py: Python<'_>, energy: f64, constants: Option<PyConstants>) -> PyResult<Py<PyAny>> {
        let matrices = self.matrices(py)?;
        let c = constants.unwrap_or_default().inner;
        let m = py.detach(|| build_matrix(&self.network, matrices, energy, &c)).map_err(err)?;
        let dict = PyDict::new(py);
        for comp in Component::ALL {
            dict.set_item(comp.name(), m.component(comp))?;
        }
        dict.set_item("values", m.values)?;
        dict.set_item("reference_energy", energy)?;
        Ok(dict.into_any().unbind())
    }

    /// Linear constants that equalise the component spreads and hit the target mean |DNUT|.
    #[pyo3(signature = (target_mean=15.0, energy=4e-4, limit=10.0))]
    fn tune_constants(&self, py: Python<'_>, target_mean: f64, energy: f64, limit: f64) -> PyResult<PyConstants> {
        let matrices = self.matrices(py)?;
        let unit = py
            .detach(|| build_matrix(&self.network, matrices, energy, &tariff::TariffConstants::unit()))
            .map_err(err)?;
        Ok(PyConstants {
            inner: tune_constants(&unit, target_mean, limit),
        })
    }

    /// Mean absolute off-diagonal DNUT in EUR/MWh.
    #[pyo3(signature = (energy=4e-4, constants=None))]
    fn mean_abs_dnut(&self, py: Python<'_>, energy: f64, constants: Option<PyConstants>) -> PyResult<f64> {
        let matrices = self.matrices(py)?;
        let c = constants.unwrap_or_default().inner;
        let m = py.detach(|| build_matrix(&self.network, matrices, energy, &c)).map_err(err)?;
        Ok(mean_abs_off_diagonal(&m.values))
    }

    /// Replays orders (dicts with owner, side, price, quantity in MWh) against the
    /// base case and returns the trade log.
    #[pyo3(signature = (orders, constants=None, mode="mixed", efr=0.2, rebuild_interval=0))]
    fn replay(
        &self,
        py: Python<'_>,
        orders: &Bound<'_, PyAny>,
        constants: Option<PyConstants>,
        mode: &str,
        efr: f64,
        rebuild_interval: usize,
    ) -> PyResult<Py<PyAny>> {
        let requests: Vec<OrderRequest> = from_py(py, orders)?;
        let mode: FlowMode = mode.parse().map_err(err)?;
        let config = MarketConfig {
            mode,
            efr,
            rebuild_interval,
            ..MarketConfig::default()
        };
        let matrices = self.matrices(py)?;
        let constants = constants.unwrap_or_default().inner;
        let log = py
            .detach(|| {
                let mut market = Market::new(&self.network, &self.base_case, matrices, constants, config)?;
                replay(&mut market, &requests)
            })
            .map_err(err)?;
        to_py(py, &log)
    }

    /// One market simulation on a generated base case. Keyword arguments
    /// override simulation settings (sr, ppr, par, efr, seed, ...).
    #[pyo3(signature = (**kwargs))]
    fn run(&self, py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
        let config = config_from(py, kwargs)?;
        let result = py.detach(|| run_single(&self.network, &config)).map_err(err)?;
        let dict = PyDict::new(py);
        dict.set_item("metrics", to_py(py, &result.metrics)?)?;
        dict.set_item("transactions", to_py(py, &result.transactions)?)?;
        Ok(dict.into_any().unbind())
    }

    /// Sweep over the share of producers, tracking DNUT between fixed pairs.
    #[pyo3(signature = (sr_values=None, consumer=None, suppliers=None, **kwargs))]
    fn case1(
        &self,
        py: Python<'_>,
        sr_values: Option<Vec<f64>>,
        consumer: Option<&str>,
        suppliers: Option<Vec<String>>,
        kwargs: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Py<PyAny>> {
        let config = config_from(py, kwargs)?;
        let tracked = match (consumer, suppliers) {
            (None, None) => TrackedPairs::default_for(&self.network),
            (c, s) => TrackedPairs::from_names(
                &self.network,
                c.unwrap_or("LOAD19"),
                &s.unwrap_or_else(|| vec!["LOAD1".into(), "LOAD23".into(), "LOAD39".into()]),
            ),
        }
        .map_err(err)?;
        let grid = sr_values.unwrap_or_else(sr_grid);
        let report = py
            .detach(|| run_case1(&self.network, &config, &tracked, &grid))
            .map_err(err)?;
        to_py(py, &report)
    }

    /// Sweep scaling one linear constant at a time.
    #[pyo3(signature = (scales=None, **kwargs))]
    fn case2(&self, py: Python<'_>, scales: Option<Vec<f64>>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
        let config = config_from(py, kwargs)?;
        let grid = scales.unwrap_or_else(scale_grid);
        let report = py.detach(|| run_case2(&self.network, &config, &grid)).map_err(err)?;
        to_py(py, &report)
    }

    /// Monte Carlo sweep over the share of active participants.
    #[pyo3(signature = (ppr_values=None, **kwargs))]
    fn case3(&self, py: Python<'_>, ppr_values: Option<Vec<f64>>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
        let config = config_from(py, kwargs)?;
        let grid = ppr_values.unwrap_or_else(ppr_grid);
        let report = py
            .detach(|| run_case3(&self.network, &config, &grid, false))
            .map_err(err)?;
        to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        format!(
            "Network({} buses, {} branches, {} prosumers)",
            self.network.nn(),
            self.network.nb(),
            self.network.np()
        )
    }
}

/// Voltage charge cell value for RMS voltages before and after a trade.
#[pyfunction]
fn delta_voltage(before: f64, after: f64, nominal: f64) -> f64 {
    tariff::delta_voltage(before, after, nominal)
}

/// Current charge cell value for signed currents before and after a trade.
#[pyfunction]
#[pyo3(signature = (before, after, magnitude_change=false))]
fn delta_current(before: f64, after: f64, magnitude_change: bool) -> f64 {
    let rule = if magnitude_change {
        MixedSignRule::MagnitudeChange
    } else {
        MixedSignRule::Literal
    };
    tariff::delta_current(before, after, rule)
}

#[pymodule]
fn dnut(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyConstants>()?;
    m.add_function(wrap_pyfunction!(delta_voltage, m)?)?;
    m.add_function(wrap_pyfunction!(delta_current, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
