#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "capslu/checkpoint.hpp"
#include "capslu/experiment.hpp"
#include "capslu/features.hpp"
#include "capslu/gradcheck.hpp"
#include "capslu/model.hpp"
#include "capslu/synth.hpp"
#include "capslu/trainer.hpp"

namespace py = pybind11;
using namespace capslu;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

FeatureSequence to_sequence(const FloatArray& frames) {
  if (frames.ndim() != 2) throw std::invalid_argument("features must be a [T, D] array");
  return FeatureSequence{to_tensor<float>(frames), 0.01};
}

std::vector<Example> to_examples(const std::vector<FloatArray>& features,
                                 const std::vector<std::vector<std::size_t>>& labels) {
  if (features.size() != labels.size()) throw std::invalid_argument("features and labels differ in length");
  std::vector<Example> out;
  for (std::size_t i = 0; i < features.size(); ++i) {
    std::vector<std::size_t> l = labels[i];
    std::sort(l.begin(), l.end());
    out.push_back(Example{"u" + std::to_string(i), to_sequence(features[i]), l});
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Capsule-network spoken language understanding core";

  py::class_<FeatureConfig>(m, "FeatureConfig")
      .def(py::init<>())
      .def_readwrite("n_mels", &FeatureConfig::n_mels)
      .def_readwrite("window_len", &FeatureConfig::window_len)
      .def_readwrite("window_step", &FeatureConfig::window_step)
      .def_readwrite("delta_window", &FeatureConfig::delta_window)
      .def_readwrite("vad_threshold", &FeatureConfig::vad_threshold)
      .def_readwrite("vad_min_silence", &FeatureConfig::vad_min_silence)
      .def_readwrite("apply_vad", &FeatureConfig::apply_vad)
      .def_property_readonly("feature_dim", &FeatureConfig::feature_dim);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("input_dim", &ModelConfig::input_dim)
      .def_readwrite("encoder_layers", &ModelConfig::encoder_layers)
      .def_readwrite("encoder_units", &ModelConfig::encoder_units)
      .def_readwrite("n_hidden_caps", &ModelConfig::n_hidden_caps)
      .def_readwrite("hidden_cap_dim", &ModelConfig::hidden_cap_dim)
      .def_readwrite("output_cap_dim", &ModelConfig::output_cap_dim)
      .def_readwrite("n_labels", &ModelConfig::n_labels)
      .def_readwrite("routing_iters", &ModelConfig::routing_iters)
      .def_readwrite("baseline_hidden", &ModelConfig::baseline_hidden);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("adam_beta1", &TrainConfig::adam_beta1)
      .def_readwrite("adam_beta2", &TrainConfig::adam_beta2)
      .def_readwrite("adam_eps", &TrainConfig::adam_eps)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("shuffle", &TrainConfig::shuffle);

  py::class_<SynthConfig>(m, "SynthConfig")
      .def(py::init<>())
      .def_readwrite("vocab_size", &SynthConfig::vocab_size)
      .def_readwrite("n_actions", &SynthConfig::n_actions)
      .def_readwrite("n_slots", &SynthConfig::n_slots)
      .def_readwrite("values_per_slot", &SynthConfig::values_per_slot)
      .def_readwrite("n_per_command", &SynthConfig::n_per_command)
      .def_readwrite("noise_level", &SynthConfig::noise_level)
      .def_readwrite("feature_dim", &SynthConfig::feature_dim)
      .def_readwrite("min_word_frames", &SynthConfig::min_word_frames)
      .def_readwrite("max_word_frames", &SynthConfig::max_word_frames)
      .def_readwrite("max_fillers", &SynthConfig::max_fillers)
      .def_readwrite("max_silence_frames", &SynthConfig::max_silence_frames)
      .def_readwrite("seed", &SynthConfig::seed);

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_property_readonly("kind", [](const Checkpoint& c) { return to_string(c.kind); })
      .def_readonly("config", &Checkpoint::config)
      .def("save", [](const Checkpoint& c, const std::filesystem::path& p) { save_checkpoint(p, c); })
      .def_static("load", &load_checkpoint)
      .def("to_bytes", [](const Checkpoint& c) {
        const std::string b = checkpoint_bytes(c);
        return py::bytes(b);
      })
      .def("predict", [](Checkpoint& c, const std::vector<FloatArray>& features) {
        std::vector<Example> ex;
        for (const auto& f : features) ex.push_back(Example{"", to_sequence(f), {}});
        const auto probs = predict_probs(c, ex);
        py::array_t<float> out({static_cast<py::ssize_t>(probs.size()), static_cast<py::ssize_t>(c.config.n_labels)});
        for (std::size_t i = 0; i < probs.size(); ++i) std::copy(probs[i].begin(), probs[i].end(), out.mutable_data() + i * c.config.n_labels);
        return out;
      }, py::arg("features"), "Label probabilities [n, L] for a list of [T, D] feature arrays.");

  m.def("load_wav", [](const std::filesystem::path& p) {
    AudioClip clip = load_wav(p);
    return py::make_tuple(py::array_t<float>(static_cast<py::ssize_t>(clip.samples.size()), clip.samples.data()), clip.sample_rate);
  }, py::arg("path"), "Mono float samples and sample rate of a 16-bit PCM WAV file.");

  m.def("extract_features", [](const FloatArray& samples, int sample_rate, const FeatureConfig& cfg) {
    AudioClip clip{std::vector<float>(samples.data(), samples.data() + samples.size()), sample_rate};
    return to_array(extract_features(clip, cfg).frames);
  }, py::arg("samples"), py::arg("sample_rate"), py::arg("config") = FeatureConfig{},
        "Log-mel + energy features with deltas, [T, 3 * (n_mels + 1)].");

  m.def("count_params", [](const std::string& kind, const ModelConfig& cfg) { return count_params(parse_model_kind(kind), cfg); },
        py::arg("kind"), py::arg("config") = ModelConfig{});

  m.def("squash", [](const DoubleArray& x) {
    ad::Tape<double> tape;
    return to_array(ad::squash(tape.constant(to_tensor<double>(x)), -1).value());
  }, py::arg("x"), "Capsule squash along the last axis.");

  m.def("dynamic_routing", [](const DoubleArray& P, const DoubleArray& B, std::size_t iters) {
    ad::Tape<double> tape;
    auto r = dynamic_routing(tape.constant(to_tensor<double>(P)), tape.constant(to_tensor<double>(B)), iters);
    return py::make_tuple(to_array(r.O.value()), to_array(r.C.value()));
  }, py::arg("predictions"), py::arg("logits"), py::arg("iters") = 3,
        "Routing by agreement on predictions [B, R, L, D] from logits [R, L]; returns (O, C).");

  m.def("train", [](const std::string& kind, const std::vector<FloatArray>& features,
                    const std::vector<std::vector<std::size_t>>& labels, const ModelConfig& model, const TrainConfig& cfg) {
    const auto ex = to_examples(features, labels);
    TrainResult r;
    {
      py::gil_scoped_release release;
      r = train(parse_model_kind(kind), model, ex, cfg);
    }
    return py::make_tuple(std::move(r.checkpoint), r.epoch_loss);
  }, py::arg("kind"), py::arg("features"), py::arg("labels"), py::arg("model"), py::arg("train") = TrainConfig{},
        "Trains a model; returns (checkpoint, per-epoch mean loss).");

  m.def("jsd", [](const std::vector<double>& p, const std::vector<double>& q) { return jsd(p, q); });

  m.def("lowess", [](const std::vector<double>& x, const std::vector<double>& y, double frac, std::size_t iters) {
    if (x.size() != y.size()) throw std::invalid_argument("x and y differ in length");
    std::vector<Point> pts;
    for (std::size_t i = 0; i < x.size(); ++i) pts.push_back(Point{x[i], y[i]});
    std::vector<double> xs, ys;
    for (const Point& p : lowess(pts, frac, iters)) {
      xs.push_back(p.x);
      ys.push_back(p.y);
    }
    return py::make_tuple(xs, ys);
  }, py::arg("x"), py::arg("y"), py::arg("frac") = 0.5, py::arg("iters") = 2);

  m.def("split_blocks", [](const std::vector<std::vector<std::size_t>>& label_sets, std::size_t n_labels,
                           std::size_t n_blocks, std::uint64_t seed, const std::string& objective) {
    BlockSplit s = split_blocks(label_sets, n_labels, n_blocks, seed, parse_split_objective(objective));
    return py::make_tuple(s.block_of, s.objective);
  }, py::arg("label_sets"), py::arg("n_labels"), py::arg("n_blocks"), py::arg("seed") = 0, py::arg("objective") = "mean");

  m.def("generate_synthetic", [](const SynthConfig& cfg) {
    SynthCorpus c = generate_synthetic(cfg);
    py::list features, labels;
    for (std::size_t i = 0; i < c.features.size(); ++i) {
      features.append(to_array(c.features[i].frames));
      labels.append(c.manifest.label_indices(c.manifest.utterances[i]));
    }
    return py::make_tuple(features, labels, c.manifest.slots.label_names);
  }, py::arg("config") = SynthConfig{}, "Returns (features, label index lists, label names).");

  m.def("gradcheck", [](std::size_t seeds, std::uint64_t seed, const std::vector<std::string>& only) {
    gradcheck::Options opt;
    opt.seeds = seeds;
    opt.root_seed = seed;
    opt.only = only;
    py::list out;
    for (const auto& r : gradcheck::run(opt)) {
      py::dict d;
      d["name"] = r.name;
      d["max_rel_error"] = r.max_rel_error;
      d["passed"] = r.passed;
      out.append(d);
    }
    return out;
  }, py::arg("seeds") = 3, py::arg("seed") = 0, py::arg("only") = std::vector<std::string>{});
}
