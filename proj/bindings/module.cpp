#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include "d3/analysis.hpp"
#include "d3/defense.hpp"
#include "d3/pipeline.hpp"

namespace py = pybind11;
using namespace d3;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr,
                         Precision precision) {
    std::vector<std::size_t> shape(arr.ndim());
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) {
        shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(arr.shape(i));
    }
    std::vector<double> values(arr.data(), arr.data() + arr.size());
    return Tensor::from_data(std::move(shape), std::move(values), precision);
}

py::array_t<double> tensor_to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> arr(shape);
    std::copy(t.data(), t.data() + t.numel(), arr.mutable_data());
    return arr;
}

} // namespace

PYBIND11_MODULE(_d3bench, m) {
    m.doc() = "backdoor attack/defense workbench: poisoning, training, distance-driven "
              "detoxification and diagnostics";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
    py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);
    py::register_exception<Error>(m, "WorkbenchError", PyExc_RuntimeError);

    py::enum_<Precision>(m, "Precision")
        .value("f32", Precision::f32)
        .value("f64", Precision::f64);

    py::class_<Tensor>(m, "Tensor")
        .def(py::init([](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
                         Precision p) { return tensor_from_array(a, p); }),
             py::arg("array"), py::arg("precision") = Precision::f64)
        .def_property_readonly("shape", [](const Tensor& t) { return t.shape(); })
        .def_property_readonly("precision", &Tensor::precision)
        .def("numpy", &tensor_to_array)
        .def("frobenius_norm", &Tensor::frobenius_norm);
    py::implicitly_convertible<py::array, Tensor>();

    py::class_<Rng>(m, "Rng")
        .def(py::init<std::uint64_t>(), py::arg("seed"))
        .def("next_u64", &Rng::next_u64)
        .def("next_double", &Rng::next_double)
        .def("next_normal", &Rng::next_normal)
        .def("next_below", &Rng::next_below)
        .def_static("derive", &Rng::derive, py::arg("seed"), py::arg("stream"));

    m.def("matmul", &matmul, py::arg("a"), py::arg("b"));
    m.def("conv2d", &conv2d, py::arg("input"), py::arg("kernels"), py::arg("stride") = 1,
          py::arg("padding") = 0);
    m.def(
        "softmax_cross_entropy",
        [](const Tensor& logits, const std::vector<int>& labels) {
            auto res = softmax_cross_entropy(logits, labels);
            return py::make_tuple(res.loss, tensor_to_array(res.grad_logits));
        },
        py::arg("logits"), py::arg("labels"));

    // ------------------------------------------------------------------ data
    py::class_<Dataset>(m, "Dataset")
        .def(py::init([](const Tensor& images, std::vector<int> labels, std::string name) {
                 Dataset ds;
                 ds.images = images;
                 ds.labels = std::move(labels);
                 ds.name = std::move(name);
                 if (ds.images.rank() != 4 || ds.images.dim(0) != ds.labels.size()) {
                     throw ContractError("Dataset expects images [N,C,H,W] matching len(labels)");
                 }
                 return ds;
             }),
             py::arg("images"), py::arg("labels"), py::arg("name") = "dataset")
        .def_property_readonly("images", [](const Dataset& ds) { return tensor_to_array(ds.images); })
        .def_readonly("labels", &Dataset::labels)
        .def_readonly("name", &Dataset::name)
        .def("__len__", &Dataset::size)
        .def("image_shape", &Dataset::image_shape)
        .def("num_classes", &Dataset::num_classes);

    m.def("synth_blobs", &synth_blobs, py::arg("num_classes"), py::arg("per_class"),
          py::arg("image_shape"), py::arg("separation"), py::arg("rng"),
          py::arg("precision") = Precision::f64);
    m.def("load_idx", &load_idx, py::arg("images_path"), py::arg("labels_path"),
          py::arg("precision") = Precision::f64);
    m.def("write_idx", &write_idx, py::arg("dataset"), py::arg("images_path"),
          py::arg("labels_path"));
    m.def("split_reserved", &split_reserved, py::arg("dataset"), py::arg("fraction"),
          py::arg("rng"));

    // ---------------------------------------------------------------- poison
    py::class_<PatchTrigger>(m, "PatchTrigger")
        .def(py::init([](std::size_t row, std::size_t col, const Tensor& pattern) {
                 return PatchTrigger{row, col, pattern};
             }),
             py::arg("row"), py::arg("col"), py::arg("pattern"));
    py::class_<BlendedTrigger>(m, "BlendedTrigger")
        .def(py::init([](const Tensor& pattern, double alpha) {
                 return BlendedTrigger{pattern, alpha};
             }),
             py::arg("pattern"), py::arg("alpha") = 0.1);
    py::class_<SinusoidalTrigger>(m, "SinusoidalTrigger")
        .def(py::init<double, int>(), py::arg("amplitude") = 0.08, py::arg("frequency") = 6);

    py::class_<AttackSpec>(m, "AttackSpec")
        .def(py::init([](const TriggerSpec& trigger, int target_label, double poison_ratio) {
                 return AttackSpec{trigger, target_label, poison_ratio};
             }),
             py::arg("trigger"), py::arg("target_label"), py::arg("poison_ratio"))
        .def_readonly("target_label", &AttackSpec::target_label)
        .def_readonly("poison_ratio", &AttackSpec::poison_ratio)
        .def_property_readonly("kind",
                               [](const AttackSpec& a) { return trigger_kind(a.trigger); });

    py::class_<PoisonedDataset>(m, "PoisonedDataset")
        .def_readonly("dataset", &PoisonedDataset::dataset)
        .def_readonly("mask", &PoisonedDataset::mask)
        .def("poisoned_count", &PoisonedDataset::poisoned_count);

    m.def("apply_trigger", &apply_trigger, py::arg("image"), py::arg("trigger"));
    m.def("poison_train", &poison_train, py::arg("dataset"), py::arg("attack"), py::arg("rng"));
    m.def("build_eval_poisoned", &build_eval_poisoned, py::arg("testset"), py::arg("attack"));
    m.def("default_patch_attack", &default_patch_attack, py::arg("image_shape"),
          py::arg("target_label"), py::arg("ratio"));
    m.def("default_blended_attack", &default_blended_attack, py::arg("image_shape"),
          py::arg("target_label"), py::arg("ratio"), py::arg("rng"), py::arg("alpha") = 0.1);
    m.def("default_sinusoidal_attack", &default_sinusoidal_attack, py::arg("target_label"),
          py::arg("ratio"));

    // ------------------------------------------------------------------- nn
    py::class_<ParamSet>(m, "ParamSet")
        .def(py::init<>())
        .def("names",
             [](const ParamSet& p) {
                 std::vector<std::string> names;
                 for (const auto& [n, t] : p) names.push_back(n);
                 return names;
             })
        .def("get", [](const ParamSet& p, const std::string& n) { return tensor_to_array(p.at(n)); })
        .def("add", [](ParamSet& p, const std::string& n, const Tensor& t) { p.add(n, t); })
        .def("__len__", &ParamSet::size);

    py::class_<ParamSelector>(m, "ParamSelector")
        .def_static("from_pattern", &ParamSelector::from_pattern, py::arg("pattern"))
        .def("matches", &ParamSelector::matches);

    py::class_<Model>(m, "Model")
        .def_property_readonly("input_shape", &Model::input_shape)
        .def_property_readonly("num_classes", &Model::num_classes)
        .def("predict", [](const Model& model, const Tensor& batch) { return predict(model, batch); })
        .def("forward",
             [](const Model& model, const Tensor& batch) {
                 return tensor_to_array(forward_logits(model, batch));
             })
        .def("params", [](const Model& model) { return clone_params(model); })
        .def("load_params", [](Model& model, const ParamSet& p) { load_params(model, p); });

    m.def(
        "make_model",
        [](const std::string& arch, const std::vector<std::size_t>& input_shape,
           std::size_t num_classes, std::uint64_t seed, Precision precision) {
            Rng rng = Rng::derive(seed, rng_streams::model_init);
            return make_model(arch, input_shape, num_classes, rng, precision);
        },
        py::arg("arch"), py::arg("input_shape"), py::arg("num_classes"), py::arg("seed") = 0,
        py::arg("precision") = Precision::f64);
    m.def("dense_weight_names", &dense_weight_names);
    m.def("select", &d3::select, py::arg("params"), py::arg("selector"));

    // ---------------------------------------------------------------- train
    py::class_<SgdConfig>(m, "SgdConfig")
        .def(py::init([](double lr, double momentum, double weight_decay, int epochs,
                         int batch_size, std::uint64_t shuffle_seed) {
                 return SgdConfig{lr, momentum, weight_decay, epochs, batch_size, shuffle_seed};
             }),
             py::arg("lr") = 0.05, py::arg("momentum") = 0.9, py::arg("weight_decay") = 5e-4,
             py::arg("epochs") = 30, py::arg("batch_size") = 64, py::arg("shuffle_seed") = 0)
        .def_readwrite("lr", &SgdConfig::learning_rate)
        .def_readwrite("momentum", &SgdConfig::momentum)
        .def_readwrite("weight_decay", &SgdConfig::weight_decay)
        .def_readwrite("epochs", &SgdConfig::epochs)
        .def_readwrite("batch_size", &SgdConfig::batch_size)
        .def_readwrite("shuffle_seed", &SgdConfig::shuffle_seed);

    py::class_<SamConfig>(m, "SamConfig")
        .def(py::init([](const SgdConfig& base, double rho) { return SamConfig{base, rho}; }),
             py::arg("base"), py::arg("rho") = 0.05)
        .def_readwrite("base", &SamConfig::base)
        .def_readwrite("rho", &SamConfig::rho);

    py::class_<EpochStats>(m, "EpochStats")
        .def_readonly("loss", &EpochStats::loss)
        .def_readonly("accuracy", &EpochStats::accuracy);
    py::class_<TrainReport>(m, "TrainReport")
        .def_readonly("epochs", &TrainReport::epochs)
        .def_readonly("stage", &TrainReport::stage);

    m.def("train_supervised", &train_supervised, py::arg("model"), py::arg("dataset"),
          py::arg("config"));
    m.def("train_supervised_sam", &train_supervised_sam, py::arg("model"), py::arg("dataset"),
          py::arg("config"));
    m.def(
        "train_backdoor",
        [](const PoisonedDataset& poisoned, const std::string& arch, const SgdConfig& sgd,
           std::optional<double> sam_rho, std::uint64_t seed, Precision precision) {
            TrainerConfig trainer{sgd, sam_rho};
            return train_backdoor(poisoned, arch, trainer, seed, precision);
        },
        py::arg("poisoned"), py::arg("arch"), py::arg("sgd"), py::arg("sam_rho") = std::nullopt,
        py::arg("seed") = 0, py::arg("precision") = Precision::f64);

    // ---------------------------------------------------------------- ckpt
    py::class_<CheckpointMeta>(m, "CheckpointMeta")
        .def_readwrite("arch", &CheckpointMeta::arch)
        .def_readwrite("seed", &CheckpointMeta::seed)
        .def_readwrite("stage", &CheckpointMeta::stage);
    py::class_<Checkpoint>(m, "Checkpoint")
        .def(py::init<>())
        .def_readwrite("params", &Checkpoint::params)
        .def_readwrite("meta", &Checkpoint::meta);
    m.def("save_checkpoint", &save_checkpoint, py::arg("checkpoint"), py::arg("path"));
    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
    m.def("model_from_checkpoint", &model_from_checkpoint, py::arg("checkpoint"),
          py::arg("input_shape"));

    // -------------------------------------------------------------- defense
    py::class_<D3Config>(m, "D3Config")
        .def(py::init([](double epsilon, double lambda, const std::string& selector,
                         double smoothing_delta, const SgdConfig& optimizer) {
                 D3Config cfg;
                 cfg.epsilon = epsilon;
                 cfg.lambda = lambda;
                 if (!selector.empty()) cfg.selector = ParamSelector::from_pattern(selector);
                 cfg.smoothing_delta = smoothing_delta;
                 cfg.optimizer = optimizer;
                 return cfg;
             }),
             py::arg("epsilon") = 0.1, py::arg("lambda_") = 10.0, py::arg("selector") = "",
             py::arg("smoothing_delta") = 1e-8,
             py::arg("optimizer") = SgdConfig{0.01, 0.9, 0.0, 20, 64, 0});

    py::class_<DefenseEpochStats>(m, "DefenseEpochStats")
        .def_readonly("clean_loss", &DefenseEpochStats::clean_loss)
        .def_readonly("distance", &DefenseEpochStats::distance)
        .def_readonly("penalty", &DefenseEpochStats::penalty);
    py::class_<DefenseReport>(m, "DefenseReport")
        .def_readonly("epochs", &DefenseReport::epochs)
        .def_readonly("stage", &DefenseReport::stage);

    m.def("distance", &distance, py::arg("theta_s"), py::arg("theta_init_s"),
          py::arg("delta") = 0.0);
    m.def("hinge_penalty", &hinge_penalty, py::arg("clean_loss"), py::arg("epsilon"),
          py::arg("lambda_"));
    m.def("d3_detoxify", &d3_detoxify, py::arg("checkpoint"), py::arg("reserved"),
          py::arg("config"));
    m.def("finetune_vanilla", &finetune_vanilla, py::arg("checkpoint"), py::arg("reserved"),
          py::arg("config"));
    m.def("finetune_sam", &finetune_sam, py::arg("checkpoint"), py::arg("reserved"),
          py::arg("config"));

    // ------------------------------------------------------------- analysis
    py::class_<MetricsRecord>(m, "MetricsRecord")
        .def_readonly("acc", &MetricsRecord::acc)
        .def_readonly("asr", &MetricsRecord::asr)
        .def_readonly("der", &MetricsRecord::der)
        .def_readonly("stage", &MetricsRecord::stage)
        .def_readonly("attack", &MetricsRecord::attack)
        .def_readonly("defense", &MetricsRecord::defense);
    py::class_<TrajectoryPoint>(m, "TrajectoryPoint")
        .def_readonly("t", &TrajectoryPoint::t)
        .def_readonly("clean_loss", &TrajectoryPoint::clean_loss)
        .def_readonly("backdoor_loss", &TrajectoryPoint::backdoor_loss)
        .def_readonly("acc", &TrajectoryPoint::acc)
        .def_readonly("asr", &TrajectoryPoint::asr);
    py::class_<TrajectoryReport>(m, "TrajectoryReport")
        .def_readonly("points", &TrajectoryReport::points);
    py::class_<QuadraticFitResult>(m, "QuadraticFitResult")
        .def_readonly("coefficient", &QuadraticFitResult::coefficient)
        .def_readonly("exponent", &QuadraticFitResult::exponent);
    py::class_<WeightDiffHistogram>(m, "WeightDiffHistogram")
        .def_readonly("edges", &WeightDiffHistogram::edges)
        .def_readonly("counts", &WeightDiffHistogram::counts);
    py::class_<IdealLossResult>(m, "IdealLossResult")
        .def_readonly("clean_loss", &IdealLossResult::clean_loss)
        .def_readonly("backdoor_loss", &IdealLossResult::backdoor_loss)
        .def_readonly("ideal", &IdealLossResult::ideal);

    m.def("accuracy", &accuracy, py::arg("model"), py::arg("dataset"));
    m.def("asr", &asr, py::arg("model"), py::arg("poisoned_eval"));
    m.def("der", &der, py::arg("acc0"), py::arg("asr0"), py::arg("acc1"), py::arg("asr1"));
    m.def("ideal_loss", &ideal_loss, py::arg("model"), py::arg("clean_set"), py::arg("attack"));
    m.def("trajectory_scan", &trajectory_scan, py::arg("proto"), py::arg("theta_init"),
          py::arg("theta_end"), py::arg("clean_set"), py::arg("attack"), py::arg("t_grid"));
    m.def("quadratic_fit", &quadratic_fit, py::arg("report"), py::arg("t_max"));
    m.def("default_t_grid", &default_t_grid);
    m.def("make_t_grid", &make_t_grid, py::arg("t_start"), py::arg("t_end"), py::arg("t_step"));
    m.def("weight_diff_histogram",
          py::overload_cast<const ParamSet&, const ParamSet&, const ParamSelector&, int>(
              &weight_diff_histogram),
          py::arg("a"), py::arg("b"), py::arg("selector"), py::arg("bins"));
    m.def("dataset_loss", &dataset_loss, py::arg("model"), py::arg("dataset"));

    // ------------------------------------------------------------- pipeline
    py::class_<ExperimentConfig>(m, "ExperimentConfig")
        .def_readwrite("seed", &ExperimentConfig::seed)
        .def_readwrite("arch", &ExperimentConfig::arch)
        .def_readwrite("output_dir", &ExperimentConfig::output_dir);

    m.def(
        "config_from_json",
        [](const std::string& text) {
            nlohmann::json doc = nlohmann::json::parse(text, nullptr, false);
            if (doc.is_discarded()) throw ValidationError("config text is not valid JSON");
            return parse_config(doc);
        },
        py::arg("text"));
    m.def("load_config_file", &load_config_file, py::arg("path"));
    m.def("run_train", &run_train, py::arg("config"));
    m.def("run_defense", &run_defense, py::arg("config"), py::arg("checkpoint"));
    m.def("run_eval", &run_eval, py::arg("config"), py::arg("checkpoints"));
    m.def("run_trajectory", &run_trajectory, py::arg("config"), py::arg("a"), py::arg("b"));
    m.def("metrics_to_csv", &metrics_to_csv, py::arg("records"));
    m.def("trajectory_to_csv", &trajectory_to_csv, py::arg("report"));
}
