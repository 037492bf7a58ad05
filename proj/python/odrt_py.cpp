// Python bindings: config handling, the subcommands, mask export and a
// handful of model entry points. Arrays cross as nested lists or numpy.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "odrt/checkpoint.hpp"
#include "odrt/commands.hpp"
#include "odrt/pipeline.hpp"

namespace py = pybind11;
using namespace odrt;

namespace {

const char* kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Config: return "config";
    case ErrorKind::Data: return "data";
    case ErrorKind::Compat: return "compat";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Training: return "training";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Contract: return "contract";
    default: return "other";
  }
}

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  auto v = t.values();
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

RunConfig config_from(py::object o) {
  if (py::isinstance<py::str>(o)) return parse_run_config(o.cast<std::string>());
  return o.cast<RunConfig>();
}

// Runs a subcommand with its log captured and returned.
template <class F>
std::string logged(F&& f) {
  std::ostringstream log;
  f(log);
  return log.str();
}

}  // namespace

PYBIND11_MODULE(_odrt, m) {
  m.doc() = "sparse diffusion-policy runtime";

  static py::handle odrt_error = py::exception<Error>(m, "OdrtError", PyExc_RuntimeError).release();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(odrt_error);
      py::object inst = exc(e.what());
      inst.attr("kind") = kind_name(e.kind());
      inst.attr("exit_code") = exit_code(e.kind());
      PyErr_SetObject(exc.ptr(), inst.ptr());
    }
  });

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("episodes", &RunConfig::episodes)
      .def_readwrite("held_out", &RunConfig::held_out)
      .def_property(
          "out", [](const RunConfig& c) { return c.paths.out; },
          [](RunConfig& c, const std::filesystem::path& p) { c.paths.out = p; })
      .def_property(
          "rho", [](const RunConfig& c) { return c.pruner_training.rho; },
          [](RunConfig& c, double v) { c.pruner_training.rho = v; })
      .def("validate", &RunConfig::validate)
      .def("dump", &dump_run_config)
      .def("hash", &run_config_hash);

  m.def("parse_config", &parse_run_config, py::arg("json_text"));
  m.def("load_config", [](const std::string& path) { return load_run_config(path); }, py::arg("path"));
  m.def(
      "apply_overrides",
      [](RunConfig cfg, std::optional<std::uint64_t> seed, std::optional<double> rho, std::optional<std::string> mode,
         std::optional<int> episodes, std::optional<std::string> out, std::optional<std::string> directions,
         std::optional<std::string> sampler, std::optional<int> ddim_steps) {
        apply_overrides(cfg, RunOverrides{seed, rho, mode, episodes, out, directions, sampler, ddim_steps});
        return cfg;
      },
      py::arg("config"), py::kw_only(), py::arg("seed") = py::none(), py::arg("rho") = py::none(),
      py::arg("mode") = py::none(), py::arg("episodes") = py::none(), py::arg("out") = py::none(),
      py::arg("directions") = py::none(), py::arg("sampler") = py::none(), py::arg("ddim_steps") = py::none());
  m.def("exit_code", [](const std::string& kind) {
    for (ErrorKind k : {ErrorKind::Usage, ErrorKind::Config, ErrorKind::Data, ErrorKind::Compat, ErrorKind::Numeric,
                        ErrorKind::Training, ErrorKind::Shape, ErrorKind::Contract})
      if (kind == kind_name(k)) return exit_code(k);
    throw py::value_error("unknown error kind " + kind);
  });

  // subcommands; each returns its log text
  m.def("record_demos", [](py::object cfg, const std::string& source) {
    const RunConfig c = config_from(cfg);
    py::gil_scoped_release nogil;
    return logged([&](std::ostream& log) { cmd_record_demos(c, source, log); });
  }, py::arg("config"), py::arg("source") = "expert");
  m.def("train_policy", [](py::object cfg) {
    const RunConfig c = config_from(cfg);
    py::gil_scoped_release nogil;
    return logged([&](std::ostream& log) { cmd_train_policy(c, log); });
  });
  m.def("train_pruner", [](py::object cfg) {
    const RunConfig c = config_from(cfg);
    py::gil_scoped_release nogil;
    return logged([&](std::ostream& log) { cmd_train_pruner(c, log); });
  });
  m.def("rollout", [](py::object cfg, bool dense) {
    const RunConfig c = config_from(cfg);
    py::gil_scoped_release nogil;
    return logged([&](std::ostream& log) { cmd_rollout(c, dense, log); });
  }, py::arg("config"), py::arg("dense") = false);
  m.def("export_masks", [](py::object cfg) {
    const RunConfig c = config_from(cfg);
    py::gil_scoped_release nogil;
    return logged([&](std::ostream& log) { cmd_export_masks(c, log); });
  });
  m.def("analyze_similarity", [](py::object cfg) {
    const RunConfig c = config_from(cfg);
    py::gil_scoped_release nogil;
    return logged([&](std::ostream& log) { cmd_analyze_similarity(c, log); });
  });
  m.def("bench", [](py::object cfg, std::optional<std::string> mode) {
    const RunConfig c = config_from(cfg);
    std::optional<PipelineMode> only;
    if (mode) only = parse_mode(*mode);
    BenchResult r;
    {
      py::gil_scoped_release nogil;
      std::ostringstream log;
      r = cmd_bench(c, only, log);
    }
    py::dict d;
    d["episodes"] = r.episodes;
    d["diffusions"] = r.diffusions;
    d["sparsity"] = r.sparsity;
    d["flops_dense"] = r.flops_dense;
    d["flops_sparse"] = r.flops_sparse;
    d["flops_ratio"] = r.flops_ratio;
    d["decoder_flops_ratio"] = r.decoder_flops_ratio;
    d["success_rate_dense"] = r.success_rate_dense;
    d["success_rate_sparse"] = r.success_rate_sparse;
    py::dict timings;
    for (const auto& t : r.timings) {
      py::dict td;
      td["t_total_median_us"] = t.t_total_median_us;
      td["t_encode_mean_us"] = t.t_encode_mean_us;
      td["t_prune_mean_us"] = t.t_prune_mean_us;
      td["t_decode_mean_us"] = t.t_decode_mean_us;
      td["t_mask_wait_mean_us"] = t.t_mask_wait_mean_us;
      td["t_overlap_hidden_mean_us"] = t.t_overlap_hidden_mean_us;
      timings[py::str(t.mode)] = td;
    }
    d["timings"] = timings;
    return d;
  }, py::arg("config"), py::arg("mode") = py::none());

  // mask export files
  py::class_<MaskExport>(m, "MaskExport")
      .def_readonly("num_blocks", &MaskExport::num_blocks)
      .def_readonly("steps", &MaskExport::steps)
      .def("iterations", &MaskExport::iterations)
      .def("compute_count", &MaskExport::compute_count)
      .def("sparsity", &MaskExport::sparsity)
      .def("__len__", [](const MaskExport& e) { return e.rows.size(); })
      .def("rows", [](const MaskExport& e) {
        py::list out;
        for (const auto& r : e.rows) {
          out.append(py::make_tuple(r.r, r.k, r.b, std::string(1, choice_letter(r.choice)), r.p[0], r.p[1], r.p[2],
                                    r.p[3], r.forced));
        }
        return out;
      })
      .def("validate", &validate_mask_export)
      .def("to_csv", [](const MaskExport& e) { return mask_export_csv(e); })
      .def("render_svg", &render_mask_svg, py::arg("r"), py::arg("comment") = "");
  m.def("parse_mask_csv", &parse_mask_export_csv, py::arg("text"));

  // model entry points
  py::class_<DiTPolicy>(m, "Policy")
      .def_static("load", [](const std::string& path) { return policy_from_envelope(read_envelope(path)); })
      .def_property_readonly("num_blocks", [](const DiTPolicy& p) { return p.config().num_blocks(); })
      .def_property_readonly("diffusion_steps", [](const DiTPolicy& p) { return p.config().diffusion_steps; })
      .def_property_readonly("obs_dim", [](const DiTPolicy& p) { return p.config().obs_dim; })
      .def(
          "act",
          [](const DiTPolicy& p, std::vector<double> obs, std::uint64_t seed, int r) {
            const SamplerPlan plan = SamplerPlan::ddpm(p.config().diffusion_steps);
            Tensor a;
            {
              py::gil_scoped_release nogil;
              a = diffuse_action(p, obs, plan, iteration_rng(seed, r)).action;
            }
            return to_numpy(a);
          },
          py::arg("obs"), py::arg("seed"), py::arg("r") = 1);

  m.def("stream_seed", &stream_seed, py::arg("run_seed"), py::arg("stage"));
}
