#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "llamba/bench.hpp"
#include "llamba/io.hpp"
#include "llamba/mohawk.hpp"

namespace py = pybind11;
using namespace llamba;

namespace {

Tensor tensor_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<std::size_t> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<std::size_t>(a.shape(i));
  Tensor t = Tensor::zeros(shape, DType::F64);
  const double* src = a.data();
  for (std::size_t i = 0; i < t.size(); ++i) t.set(i, src[i]);
  return t;
}

py::array_t<double> numpy_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> a(shape);
  double* dst = a.mutable_data();
  for (std::size_t i = 0; i < t.size(); ++i) dst[i] = t.get(i);
  return a;
}

LlambaConfig config_from_kwargs(int n_blocks, int d_model, int n_heads, int head_dim,
                                int state_dim, int mlp_hidden, int vocab) {
  LlambaConfig c;
  c.n_blocks = n_blocks;
  c.d_model = d_model;
  c.n_heads = n_heads;
  c.head_dim = head_dim;
  c.state_dim = state_dim;
  c.mlp_hidden = mlp_hidden;
  c.vocab = vocab;
  return c;
}

struct PyStudent {
  Model model;

  py::array_t<double> logits(const std::vector<int>& tokens) const {
    return numpy_from_tensor(student_forward(model, tokens).logits);
  }
  py::array_t<double> decode_logits(const std::vector<int>& tokens) const {
    ModelState st = init_model_state(model);
    Tensor out = Tensor::zeros({tokens.size(), static_cast<std::size_t>(model.cfg.vocab)},
                               DType::F64);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      Tensor row = decode(model, st, tokens[t]);
      for (std::size_t j = 0; j < row.size(); ++j) out.set_at(t, j, row.get(j));
    }
    return numpy_from_tensor(out);
  }
  std::vector<int> generate(const std::vector<int>& prompt, int max_tokens, double temp,
                            std::uint64_t seed) const {
    ModelState st = init_model_state(model);
    std::mt19937_64 rng(seed);
    Tensor logits;
    for (int t : prompt) logits = decode(model, st, t);
    std::vector<int> out;
    for (int i = 0; i < max_tokens; ++i) {
      int tok = sample_token(logits, temp, rng);
      out.push_back(tok);
      logits = decode(model, st, tok);
    }
    return out;
  }
  std::size_t state_bytes() const { return student_state_bytes(model); }
  void save(const std::string& path) const { save_model(model, path); }
};

struct PyTeacher {
  Teacher teacher;

  py::array_t<double> logits(const std::vector<int>& tokens) const {
    return numpy_from_tensor(teacher_forward(teacher, tokens).logits);
  }
  std::vector<py::array_t<double>> attn_matrices(const std::vector<int>& tokens,
                                                 std::size_t block) const {
    Capture cap;
    cap.hidden_states = true;
    cap.mixer_matrices = true;
    TeacherForward fw = teacher_forward(teacher, tokens, cap);
    std::vector<py::array_t<double>> out;
    for (const Tensor& m : fw.attn_matrices.at(block)) out.push_back(numpy_from_tensor(m));
    return out;
  }
  void save(const std::string& path) const { save_teacher(teacher, path); }
};

std::vector<std::tuple<long, double, double>> report_rows(const StageReport& rep) {
  std::vector<std::tuple<long, double, double>> rows;
  for (const auto& s : rep.steps) rows.emplace_back(s.step, s.lr, s.loss);
  return rows;
}

}  // namespace

PYBIND11_MODULE(_llamba, m) {
  m.doc() = "Llamba core: discrete Mamba-2 runtime, MOHAWK distillation, 4-bit quantization";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  py::class_<PyStudent>(m, "Student")
      .def(py::init([](int n_blocks, int d_model, int n_heads, int head_dim, int state_dim,
                       int mlp_hidden, int vocab, std::uint64_t seed) {
             return PyStudent{init_student(
                 config_from_kwargs(n_blocks, d_model, n_heads, head_dim, state_dim, mlp_hidden,
                                    vocab),
                 seed)};
           }),
           py::arg("n_blocks") = 2, py::arg("d_model") = 32, py::arg("n_heads") = 2,
           py::arg("head_dim") = 16, py::arg("state_dim") = 16, py::arg("mlp_hidden") = 64,
           py::arg("vocab") = 258, py::arg("seed") = 0)
      .def_static("load", [](const std::string& p) { return PyStudent{load_model(p)}; })
      .def("logits", &PyStudent::logits, py::arg("tokens"),
           "full-sequence forward, returns [T x V] logits")
      .def("decode_logits", &PyStudent::decode_logits, py::arg("tokens"),
           "token-by-token recurrent decode over the same tokens")
      .def("generate", &PyStudent::generate, py::arg("prompt"), py::arg("max_tokens") = 32,
           py::arg("temp") = 0.0, py::arg("seed") = 0)
      .def("state_bytes", &PyStudent::state_bytes)
      .def("save", &PyStudent::save, py::arg("path"))
      .def_property_readonly("vocab", [](const PyStudent& s) { return s.model.cfg.vocab; });

  py::class_<PyTeacher>(m, "Teacher")
      .def(py::init([](int n_blocks, int d_model, int n_heads, int head_dim, int state_dim,
                       int mlp_hidden, int vocab, std::uint64_t seed) {
             return PyTeacher{init_teacher(
                 config_from_kwargs(n_blocks, d_model, n_heads, head_dim, state_dim, mlp_hidden,
                                    vocab),
                 seed)};
           }),
           py::arg("n_blocks") = 2, py::arg("d_model") = 32, py::arg("n_heads") = 2,
           py::arg("head_dim") = 16, py::arg("state_dim") = 16, py::arg("mlp_hidden") = 64,
           py::arg("vocab") = 258, py::arg("seed") = 0)
      .def_static("load", [](const std::string& p) { return PyTeacher{load_teacher(p)}; })
      .def("logits", &PyTeacher::logits, py::arg("tokens"))
      .def("attn_matrices", &PyTeacher::attn_matrices, py::arg("tokens"), py::arg("block"))
      .def("save", &PyTeacher::save, py::arg("path"));

  py::class_<Corpus>(m, "Corpus")
      .def(py::init<std::uint64_t>(), py::arg("seed"))
      .def("sequence", &Corpus::sequence, py::arg("index"), py::arg("length"),
           py::arg("with_bos") = true);

  m.def(
      "distill",
      [](const PyTeacher& teacher, PyStudent& student, int stage, long token_budget,
         int batch_size, int seq_len, double peak_lr, std::uint64_t corpus_seed) {
        StagePlan plan = default_plan(stage, token_budget, seq_len);
        plan.batch_size = batch_size;
        plan.peak_lr = peak_lr;
        Corpus corpus(corpus_seed);
        AdamW opt;
        return report_rows(run_stage(plan, teacher.teacher, student.model, corpus, opt));
      },
      py::arg("teacher"), py::arg("student"), py::arg("stage"), py::arg("token_budget"),
      py::arg("batch_size") = 8, py::arg("seq_len") = 16, py::arg("peak_lr") = 1e-3,
      py::arg("corpus_seed") = 1234,
      "run one MOHAWK stage; returns [(step, lr, loss), ...]");

  m.def(
      "quantize_roundtrip",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& w,
         std::size_t group_size) {
        return numpy_from_tensor(dequantize(quantize(tensor_from_numpy(w), group_size),
                                            DType::F64));
      },
      py::arg("w"), py::arg("group_size") = 32,
      "4-bit group quantization followed by dequantization");

  m.def("quantize_file", [](const std::string& in, const std::string& out) {
    save_bundle(quantize_model_bundle(load_bundle(in)), out);
  });

  m.def(
      "wsd_lr",
      [](long step, long total_steps, double peak_lr, double min_lr, double warmup_frac,
         double decay_frac) {
        StagePlan plan;
        plan.peak_lr = peak_lr;
        plan.min_lr = min_lr;
        plan.warmup_frac = warmup_frac;
        plan.decay_frac = decay_frac;
        return wsd_lr(step, total_steps, plan);
      },
      py::arg("step"), py::arg("total_steps"), py::arg("peak_lr") = 1e-4,
      py::arg("min_lr") = 1e-8, py::arg("warmup_frac") = 0.1, py::arg("decay_frac") = 0.1);

  m.def("silu_unit_bias", &silu_unit_bias);

  m.def(
      "matmul",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& b) {
        return numpy_from_tensor(matmul(tensor_from_numpy(a), tensor_from_numpy(b)));
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "softmax_rows",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a, bool causal) {
        return numpy_from_tensor(softmax_rows(tensor_from_numpy(a), causal));
      },
      py::arg("a"), py::arg("causal") = false);
}
