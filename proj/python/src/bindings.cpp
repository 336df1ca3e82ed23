// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cli.hpp"
#include "cwamsn/error.hpp"
#include "cwamsn/msnloss.hpp"
#include "cwamsn/ndt_io.hpp"
#include "cwamsn/retrieval.hpp"
#include "cwamsn/synthetic.hpp"
#include "cwamsn/trainloop.hpp"

namespace py = pybind11;
using namespace cwamsn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

nd::Tensor64 to_tensor(const Array& a) {
  nd::Shape shape(a.shape(), a.shape() + a.ndim());
  return nd::Tensor64::from_data(std::move(shape), nd::Buffer<double>(a.data(), a.data() + a.size()));
}

template <typename T>
Array to_array(const nd::BasicTensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

KeyValueConfig to_kv(const std::map<std::string, std::string>& values) {
  KeyValueConfig kv;
  for (const auto& [k, v] : values) kv.set(k, v);
  return kv;
}

retrieval::Aggregates aggregates_from(const Array& features, const std::vector<std::string>& ids) {
  if (features.ndim() != 2 || static_cast<std::size_t>(features.shape(0)) != ids.size()) {
    throw ShapeError("features must be [n, d] with one id per row");
  }
  const auto d = static_cast<std::size_t>(features.shape(1));
  std::vector<train::EmbeddingRow> rows;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* r = features.data() + i * d;
    rows.push_back({{"", "", std::to_string(i)}, ids[i], std::vector<float>(r, r + d)});
  }
  return retrieval::aggregate(rows);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of cwamsn: synthetic screens, training, and retrieval benchmarks.";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"cwamsn"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a cwamsn command; returns (exit_code, stdout, stderr).");

  m.def(
      "generate_synthetic",
      [](const std::filesystem::path& out_dir, const std::map<std::string, std::string>& config) {
        const auto cfg = hcs::SyntheticConfig::read_from(to_kv(config));
        const auto ds = hcs::generate_synthetic(cfg, out_dir);
        py::dict d;
        d["wells"] = ds.manifest.records().size();
        d["perturbations"] = ds.manifest.n_perturbations();
        d["relationships"] = ds.truth.relationships;
        d["compound_targets"] = ds.truth.compound_targets;
        d["ineligible_cross_well"] = ds.ineligible_cross_well;
        return d;
      },
      py::arg("out_dir"), py::arg("config") = std::map<std::string, std::string>{},
      "Write a synthetic screen; config keys are data.* strings.");

  m.def("load_ndt", [](const std::filesystem::path& p) { return to_array(nd::load_ndt(p)); }, py::arg("path"));
  m.def(
      "save_ndt",
      [](const std::filesystem::path& p, const Array& a) { nd::save_ndt(p, to_tensor(a).cast<float>()); },
      py::arg("path"), py::arg("array"));

  m.def(
      "assignment_scores",
      [](const Array& prototypes, const Array& z, double tau) {
        return to_array(msn::assignment_scores(to_tensor(prototypes), to_tensor(z), tau));
      },
      py::arg("prototypes"), py::arg("z"), py::arg("tau"));

  m.def(
      "msn_loss",
      [](const Array& target, const Array& anchor, double lambda1, double lambda2) {
        msn::LossConfig cfg;
        cfg.lambda1 = lambda1;
        cfg.lambda2 = lambda2;
        const auto t = msn::msn_loss(to_tensor(target), to_tensor(anchor), cfg);
        py::dict d;
        d["loss"] = t.loss.item();
        d["cross_entropy"] = t.cross_entropy;
        d["entropy"] = t.entropy;
        return d;
      },
      py::arg("target"), py::arg("anchor"), py::arg("lambda1") = 1.0, py::arg("lambda2") = 1.0);

  m.def(
      "schedule",
      [](std::size_t epochs, std::size_t warmup_epochs, std::size_t steps_per_epoch) {
        train::TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.warmup_epochs = warmup_epochs;
        const auto s = train::Schedule::make(cfg, steps_per_epoch);
        std::vector<std::tuple<double, double, double>> out;
        for (std::size_t t = 0; t < s.total_steps; ++t) {
          out.emplace_back(train::lr_at(t, s), train::wd_at(t, s), train::momentum_at(t, s));
        }
        return out;
      },
      py::arg("epochs"), py::arg("warmup_epochs"), py::arg("steps_per_epoch"),
      "(lr, wd, momentum) per step with the default schedule constants.");

  m.def(
      "parameter_count", [](const std::string& preset) { return vit::parameter_count(vit::EncoderConfig::preset(preset)); },
      py::arg("preset"));

  m.def(
      "gene_gene_recall",
      [](const Array& features, const std::vector<std::string>& ids,
         const std::vector<std::pair<std::string, std::string>>& known, double fraction) {
        const auto r = retrieval::gene_gene_recall(aggregates_from(features, ids), known, fraction);
        py::dict d;
        d["pairs"] = r.n_pairs;
        d["k"] = r.k;
        d["known"] = r.known;
        d["discovered"] = r.discovered;
        d["recall"] = r.recall;
        return d;
      },
      py::arg("features"), py::arg("ids"), py::arg("known"), py::arg("fraction") = 0.05,
      "Rows sharing an id are averaged before ranking.");

  m.def(
      "compound_gene_metrics",
      [](const Array& features, const std::vector<std::string>& ids,
         const std::vector<std::pair<std::string, std::string>>& targets, std::size_t n_permutations,
         std::uint64_t seed) {
        const auto ag = aggregates_from(features, ids);
        const auto r = retrieval::compound_gene_metrics(ag, targets);
        const auto z = retrieval::zscore_vs_random(r, ag, targets, n_permutations, seed);
        py::dict d;
        d["auc_mean"] = r.auc_mean;
        d["ap_mean"] = r.ap_mean;
        d["auc_z"] = z.auc_z ? py::cast(*z.auc_z) : py::none();
        d["ap_z"] = z.ap_z ? py::cast(*z.ap_z) : py::none();
        d["excluded"] = r.excluded;
        return d;
      },
      py::arg("features"), py::arg("ids"), py::arg("targets"), py::arg("n_permutations") = 1000,
      py::arg("seed") = 0);
}
