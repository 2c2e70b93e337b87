//! Python module `farview`: an in-process node, a client connection, and
//! the experiment runner.

use std::sync::Mutex;

use farview_core::bench::{run_experiment, Path, QueryName, WorkloadSpec};
use farview_core::client::{ClientError, FTable, QPair};
use farview_core::operators::{AggFn, AggValue, AggregateSpec, Comparator, Measure, SelectionPredicate, Term};
use farview_core::schema::Schema;
use farview_core::server::{Node as CoreNode, ServerConfig};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(farview, FarviewError, PyException);

fn client_err(e: ClientError) -> PyErr {
    FarviewError::new_err(e.to_string())
}

fn comparator(op: &str) -> PyResult<Comparator> {
    let op = if op == "==" { "=" } else { op };
    Comparator::ALL
        .into_iter()
        .find(|c| c.symbol() == op)
        .ok_or_else(|| PyValueError::new_err(format!("unknown comparison {op:?}")))
}

fn agg_fn(name: &str) -> PyResult<AggFn> {
    Ok(match name.to_ascii_lowercase().as_str() {
        "count" => AggFn::Count,
        "min" => AggFn::Min,
        "max" => AggFn::Max,
        "sum" => AggFn::Sum,
        "avg" => AggFn::Avg,
        o => return Err(PyValueError::new_err(format!("unknown aggregate {o:?}"))),
    })
}

fn rows_out<'py>(py: Python<'py>, rows: &[Vec<u8>]) -> Vec<Bound<'py, PyBytes>> {
    rows.iter().map(|r| PyBytes::new(py, r)).collect()
}

/// A memory node running inside this process.
#[pyclass(module = "farview")]
struct Node {
    inner: Mutex<Option<CoreNode>>,
    address: String,
}

#[pymethods]
impl Node {
    /// Keyword arguments are node config keys, e.g. `Node(regions=4, mtu=512)`.
    #[new]
    #[pyo3(signature = (**config))]
    fn new(config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = ServerConfig {
            listen: "127.0.0.1:0".into(),
            ..Default::default()
        };
        if let Some(d) = config {
            for (k, v) in d.iter() {
                let key: String = k.extract()?;
                let value = match v.extract::<bool>() {
                    Ok(b) => b.to_string(),
                    Err(_) => v.str()?.to_string(),
                };
                cfg.set(&key, &value).map_err(|e| PyValueError::new_err(e.to_string()))?;
            }
        }
        cfg.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        let node = CoreNode::start(cfg).map_err(|e| FarviewError::new_err(e.to_string()))?;
        Ok(Node {
            address: node.addr().to_string(),
            inner: Mutex::new(Some(node)),
        })
    }

    #[getter]
    fn address(&self) -> &str {
        &self.address
    }

    fn shutdown(&self, py: Python<'_>) {
        let node = self.inner.lock().unwrap().take();
        py.detach(move || drop(node));
    }

    fn __repr__(&self) -> String {
        format!("Node({})", self.address)
    }
}

/// A table allocated on a node.
#[pyclass(module = "farview")]
struct Table {
    inner: FTable,
}

#[pymethods]
impl Table {
    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn tuple_bytes(&self) -> usize {
        self.inner.schema.tuple_bytes()
    }

    #[getter]
    fn vaddr(&self) -> Option<u64> {
        self.inner.base_vaddr
    }

    fn __repr__(&self) -> String {
        format!("Table({:?}, rows={})", self.inner.name, self.inner.rows())
    }
}

/// One connection to a node.
#[pyclass(module = "farview")]
struct Client {
    qp: Mutex<QPair>,
}

impl Client {
    fn with<T: Send>(&self, py: Python<'_>, f: impl FnOnce(&mut QPair) -> Result<T, ClientError> + Send) -> PyResult<T> {
        py.detach(|| f(&mut self.qp.lock().unwrap())).map_err(client_err)
    }
}

#[pymethods]
impl Client {
    #[new]
    fn new(py: Python<'_>, address: String) -> PyResult<Self> {
        let qp = py.detach(|| QPair::open_connection(address.as_str())).map_err(client_err)?;
        Ok(Client { qp: Mutex::new(qp) })
    }

    #[getter]
    fn region(&self) -> usize {
        self.qp.lock().unwrap().region()
    }

    /// Allocates a table of `rows` tuples with the given column widths.
    fn alloc_table(&self, py: Python<'_>, name: String, column_bytes: Vec<u32>, rows: usize) -> PyResult<Table> {
        let schema = Schema::new(column_bytes).map_err(|e| PyValueError::new_err(e.0))?;
        let mut ft = FTable::new(name, schema, rows);
        self.with(py, |qp| qp.alloc_table_mem(&mut ft))?;
        Ok(Table { inner: ft })
    }

    fn write(&self, py: Python<'_>, table: &Table, data: Vec<u8>) -> PyResult<()> {
        self.with(py, |qp| qp.table_write(&table.inner, &data))
    }

    fn read<'py>(&self, py: Python<'py>, table: &Table) -> PyResult<Bound<'py, PyBytes>> {
        let b = self.with(py, |qp| qp.table_read(&table.inner))?;
        Ok(PyBytes::new(py, &b))
    }

    fn free(&self, py: Python<'_>, table: &Table) -> PyResult<()> {
        self.with(py, |qp| qp.free_table_mem(&table.inner))
    }

    /// Rows whose unsigned integer `column` compares to `value`, projected to `proj` (a column bitmask).
    #[pyo3(signature = (table, proj, column, op, value, vectorized = false))]
    fn select<'py>(
        &self,
        py: Python<'py>,
        table: &Table,
        proj: u64,
        column: usize,
        op: &str,
        value: u64,
        vectorized: bool,
    ) -> PyResult<Vec<Bound<'py, PyBytes>>> {
        let p = SelectionPredicate::single(Term::uint(column, comparator(op)?, value));
        let r = self.with(py, |qp| {
            if vectorized {
                qp.select_vectorized(&table.inner, proj, p)
            } else {
                qp.select_where(&table.inner, proj, p)
            }
        })?;
        Ok(rows_out(py, &r.rows))
    }

    fn distinct<'py>(&self, py: Python<'py>, table: &Table, proj: u64, keys: u64) -> PyResult<Vec<Bound<'py, PyBytes>>> {
        let r = self.with(py, |qp| qp.distinct(&table.inner, proj, keys))?;
        Ok(rows_out(py, &r.rows))
    }

    fn regex<'py>(
        &self,
        py: Python<'py>,
        table: &Table,
        proj: u64,
        column: usize,
        pattern: String,
    ) -> PyResult<Vec<Bound<'py, PyBytes>>> {
        let r = self.with(py, |qp| qp.regex(&table.inner, proj, column, &pattern))?;
        Ok(rows_out(py, &r.rows))
    }

    /// Groups on the `key_columns` bitmask. `measures` is a list of
    /// `(column, "count" | "min" | "max" | "sum" | "avg")`. Returns
    /// `(key_bytes, [values])` pairs.
    fn group_by<'py>(
        &self,
        py: Python<'py>,
        table: &Table,
        key_columns: u64,
        measures: Vec<(usize, String)>,
    ) -> PyResult<Vec<(Bound<'py, PyBytes>, Vec<Py<PyAny>>)>> {
        let spec = AggregateSpec {
            key_columns,
            measures: measures
                .iter()
                .map(|(c, f)| Ok(Measure { column: *c, func: agg_fn(f)? }))
                .collect::<PyResult<_>>()?,
        };
        let s2 = spec.clone();
        let r = self.with(py, |qp| qp.group_by(&table.inner, s2))?;
        r.groups(&spec, &table.inner.schema)
            .into_iter()
            .map(|g| {
                let vals = g
                    .finalize(&spec)
                    .into_iter()
                    .map(|v| match v {
                        AggValue::Int(i) => Ok(i.into_pyobject(py)?.into_any().unbind()),
                        AggValue::Float(f) => Ok(f.into_pyobject(py)?.into_any().unbind()),
                    })
                    .collect::<PyResult<_>>()?;
                Ok((PyBytes::new(py, &g.key), vals))
            })
            .collect()
    }

    fn close(&self, py: Python<'_>) -> PyResult<()> {
        self.with(py, |qp| qp.close())
    }
}

/// Runs a workload and returns one dict per timed run.
#[pyfunction]
#[pyo3(signature = (query, rows = 65536, tuple_bytes = 64, selectivity = 1.0, groups = 256, clients = 1, runs = 3, paths = "fv,fvv,lcpu,rcpu", seed = 1))]
#[allow(clippy::too_many_arguments)]
fn run_bench<'py>(
    py: Python<'py>,
    query: &str,
    rows: usize,
    tuple_bytes: usize,
    selectivity: f64,
    groups: usize,
    clients: usize,
    runs: usize,
    paths: &str,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let spec = WorkloadSpec {
        query: query.parse::<QueryName>().map_err(PyValueError::new_err)?,
        rows,
        tuple_bytes,
        selectivity,
        groups,
        clients,
        runs,
        seed,
        ..Default::default()
    };
    let paths: Vec<Path> = farview_core::bench::parse_paths(paths).map_err(PyValueError::new_err)?;
    let res = py
        .detach(|| run_experiment(&spec, &paths, None))
        .map_err(|e| FarviewError::new_err(e.to_string()))?;
    res.records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("path", r.path.label())?;
            d.set_item("query", r.query.as_str())?;
            d.set_item("rows", r.rows)?;
            d.set_item("tuple_bytes", r.tuple_bytes)?;
            d.set_item("selectivity", spec.selectivity)?;
            d.set_item("run", r.run)?;
            d.set_item("client", r.client)?;
            d.set_item("wall_us", r.wall_us)?;
            d.set_item("bytes_on_wire", r.bytes_on_wire)?;
            d.set_item("rows_out", r.rows_out)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn farview(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FarviewError", m.py().get_type::<FarviewError>())?;
    m.add_class::<Node>()?;
    m.add_class::<Client>()?;
    m.add_class::<Table>()?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    Ok(())
}
