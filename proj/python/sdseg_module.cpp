#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sdseg/data.hpp"
#include "sdseg/grad_check.hpp"
#include "sdseg/infer.hpp"
#include "sdseg/metrics.hpp"
#include "sdseg/parallel.hpp"
#include "sdseg/train.hpp"
#include "sdseg/unet.hpp"

namespace py = pybind11;
using namespace sdseg;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<int> shape;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<int>(a.shape(i)));
    std::vector<double> data(a.data(), a.data() + a.size());
    return Tensor(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape;
    for (int i = 0; i < t.rank(); ++i) shape.push_back(t.dim(i));
    py::array_t<double> a(shape);
    std::copy_n(t.data(), t.size(), a.mutable_data());
    return a;
}

DamageMask mask_from_array(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw ShapeError("mask must be a 2-d uint8 array");
    DamageMask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::copy_n(a.data(), m.labels.size(), m.labels.begin());
    return m;
}

py::array_t<std::uint8_t> array_from_mask(const DamageMask& m) {
    py::array_t<std::uint8_t> a({static_cast<py::ssize_t>(m.h), static_cast<py::ssize_t>(m.w)});
    std::copy_n(m.labels.data(), m.labels.size(), a.mutable_data());
    return a;
}

}  // namespace

PYBIND11_MODULE(sdseg, m) {
    m.doc() = "Bayesian U-Net semantic damage segmentation on sensor grids";

    m.def("set_threads", &ThreadPool::set_threads, py::arg("n"));

    py::class_<ScenarioSpec>(m, "ScenarioSpec")
        .def(py::init<>())
        .def_readwrite("grid_h", &ScenarioSpec::grid_h)
        .def_readwrite("grid_w", &ScenarioSpec::grid_w)
        .def_readwrite("mix_none", &ScenarioSpec::mix_none)
        .def_readwrite("mix_soft_story", &ScenarioSpec::mix_soft_story)
        .def_readwrite("mix_cluster", &ScenarioSpec::mix_cluster)
        .def_readwrite("mix_scattered", &ScenarioSpec::mix_scattered)
        .def_readwrite("damage_fraction", &ScenarioSpec::damage_fraction)
        .def_readwrite("channels", &ScenarioSpec::channels)
        .def_readwrite("noise_sigma", &ScenarioSpec::noise_sigma)
        .def_readwrite("stochastic_sigma", &ScenarioSpec::stochastic_sigma)
        .def_readwrite("seed", &ScenarioSpec::seed);

    py::enum_<Split>(m, "Split")
        .value("TRAIN", Split::kTrain)
        .value("VAL", Split::kVal)
        .value("TEST", Split::kTest);

    py::class_<Dataset>(m, "Dataset")
        .def_readonly("spec", &Dataset::spec)
        .def_readonly("signature", &Dataset::signature)
        .def("__len__", [](const Dataset& ds) { return ds.observations.size(); })
        .def("indices", &Dataset::indices, py::arg("split"))
        .def("damage_fraction", &Dataset::damage_fraction)
        .def("features",
             [](const Dataset& ds, int i) {
                 return array_from_tensor(ds.observations.at(static_cast<std::size_t>(i)).features);
             },
             py::arg("i"))
        .def("mask",
             [](const Dataset& ds, int i) {
                 return array_from_mask(ds.observations.at(static_cast<std::size_t>(i)).mask);
             },
             py::arg("i"))
        .def("stochastic_features",
             [](const Dataset& ds, int k) {
                 return array_from_tensor(ds.stochastic_test.at(static_cast<std::size_t>(k)));
             },
             py::arg("k"), "stochastic test features, k-th test observation")
        .def("save", [](const Dataset& ds, const std::string& base) { save_dataset(ds, base); },
             py::arg("base_path"));

    m.def("gen_dataset", &gen_dataset, py::arg("n_obs"), py::arg("spec"));
    m.def("load_dataset", &load_dataset, py::arg("base_path"));

    py::class_<ArchConfig>(m, "ArchConfig")
        .def(py::init<>())
        .def_readwrite("in_channels", &ArchConfig::in_channels)
        .def_readwrite("grid_h", &ArchConfig::grid_h)
        .def_readwrite("grid_w", &ArchConfig::grid_w)
        .def_readwrite("depth", &ArchConfig::depth)
        .def_readwrite("base_filters", &ArchConfig::base_filters)
        .def_readwrite("dlc", &ArchConfig::dlc)
        .def_readwrite("p_do", &ArchConfig::p_do);

    py::class_<UNetModel>(m, "UNetModel")
        .def_readonly("arch", &UNetModel::arch)
        .def("param_count", &UNetModel::param_count)
        .def("param_names", [](const UNetModel& model) {
            std::vector<std::string> names;
            for (const auto& p : model.params) names.push_back(p.name);
            return names;
        });

    m.def("build_unet", &build_unet, py::arg("arch"), py::arg("seed"));

    m.def(
        "forward",
        [](const UNetModel& model, const py::array_t<double>& input, bool dropout_active,
           std::uint64_t seed) {
            const Tensor x = tensor_from_array(input);
            StreamRng rng(seed);
            UNetForwardOptions opts;
            opts.dropout_active = dropout_active;
            opts.rng = &rng;
            return array_from_tensor(unet_forward(model, x, opts));
        },
        py::arg("model"), py::arg("input"), py::arg("dropout_active") = false, py::arg("seed") = 0,
        "class probabilities [2,H,W] (or [N,2,H,W]) for a feature grid");

    py::enum_<WeightMode>(m, "WeightMode").value("UW", WeightMode::kUW).value("MFW", WeightMode::kMFW);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("lr0", &TrainConfig::lr0)
        .def_readwrite("lr_decay", &TrainConfig::lr_decay)
        .def_readwrite("l2", &TrainConfig::l2)
        .def_readwrite("batch", &TrainConfig::batch)
        .def_readwrite("max_epochs", &TrainConfig::max_epochs)
        .def_readwrite("patience", &TrainConfig::patience)
        .def_readwrite("weight_mode", &TrainConfig::weight_mode)
        .def_readwrite("n_val_samples", &TrainConfig::n_val_samples)
        .def_readwrite("seed", &TrainConfig::seed);

    m.def(
        "train",
        [](const UNetModel& init, const Dataset& ds, const TrainConfig& cfg) {
            const TrainResult r = train(init, ds, cfg);
            py::dict history;
            std::vector<double> train_loss, val_loss;
            for (const auto& row : r.history.epochs) {
                train_loss.push_back(row.train_loss);
                val_loss.push_back(row.val_loss);
            }
            history["train_loss"] = train_loss;
            history["val_loss"] = val_loss;
            history["best_epoch"] = r.history.best_epoch;
            history["best_val_loss"] = r.history.best_val_loss;
            return py::make_tuple(r.best.model, history);
        },
        py::arg("model"), py::arg("dataset"), py::arg("config"),
        "returns (best_model, history dict)");

    m.def(
        "class_weights",
        [](const std::vector<py::array_t<std::uint8_t>>& masks, WeightMode mode) {
            std::vector<DamageMask> ms;
            for (const auto& a : masks) ms.push_back(mask_from_array(a));
            return class_weights(ms, mode);
        },
        py::arg("masks"), py::arg("mode"));

    py::enum_<Rule>(m, "Rule").value("MAP", Rule::kMAP).value("ML", Rule::kML);

    m.def(
        "mc_infer",
        [](const UNetModel& model, const py::array_t<double>& input, int n_sample, Rule rule,
           std::pair<double, double> priors, std::uint64_t seed, std::uint64_t obs_id) {
            const Tensor x = tensor_from_array(input);
            const InferOutput out = infer(model, x, n_sample, rule, priors, seed, obs_id);
            py::dict d;
            d["labels"] = array_from_mask(out.decision.labels);
            d["mean_probs"] = array_from_tensor(out.posterior.mean_probs);
            d["variance"] = array_from_tensor(out.posterior.variance);
            d["max_variance"] = out.posterior.max_variance;
            d["normalized_mask"] = array_from_tensor(out.normalized_mask);
            d["n_sample"] = out.posterior.n_sample;
            return d;
        },
        py::arg("model"), py::arg("input"), py::arg("n_sample") = 50, py::arg("rule") = Rule::kMAP,
        py::arg("priors") = std::pair<double, double>{0.5, 0.5}, py::arg("seed") = 1,
        py::arg("obs_id") = 0,
        "Monte Carlo dropout inference: labels, expected probabilities, softmax variance");

    m.def(
        "metrics",
        [](const py::array_t<std::uint8_t>& truth, const py::array_t<std::uint8_t>& pred) {
            const Confusion2 c = confusion(mask_from_array(truth), mask_from_array(pred));
            py::dict d;
            const auto [acc_nd, acc_d] = class_acc(c);
            d["mca"] = mca(c);
            d["ga"] = ga(c);
            d["acc_nd"] = acc_nd;
            d["acc_d"] = acc_d;
            return d;
        },
        py::arg("truth"), py::arg("pred"));

    m.def("save_checkpoint",
          [](const UNetModel& model, const std::string& path, std::int64_t epoch,
             std::pair<double, double> priors) {
              Checkpoint c;
              c.model = model;
              c.epoch = epoch;
              c.prior_nd = priors.first;
              c.prior_d = priors.second;
              save_checkpoint(c, path);
          },
          py::arg("model"), py::arg("path"), py::arg("epoch") = 0,
          py::arg("priors") = std::pair<double, double>{0.5, 0.5});
    m.def("load_checkpoint", [](const std::string& path) {
        const Checkpoint c = load_checkpoint(path);
        py::dict d;
        d["model"] = c.model;
        d["epoch"] = c.epoch;
        d["priors"] = std::make_pair(c.prior_nd, c.prior_d);
        return d;
    });

    m.def("gradcheck_layers", [](std::uint64_t seed) {
        py::list rows;
        for (const auto& r : gradcheck_layers(seed, 3)) {
            py::dict d;
            d["layer"] = r.layer;
            d["max_rel_err"] = r.max_rel_err;
            d["tolerance"] = r.tolerance;
            d["pass"] = r.pass;
            rows.append(d);
        }
        return rows;
    }, py::arg("seed") = 1);
}
