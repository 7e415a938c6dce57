// Python bindings for the preference-training core.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "prefpipe/annotate.hpp"
#include "prefpipe/dpo.hpp"
#include "prefpipe/errors.hpp"
#include "prefpipe/prefs.hpp"

namespace py = pybind11;
using namespace prefpipe;

PYBIND11_MODULE(_prefpipe, m) {
    m.doc() = "Preference-pair construction and tabular DPO training core";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);

    py::class_<TabularPolicy>(m, "TabularPolicy")
        .def(py::init<std::size_t, std::size_t, std::vector<double>>(),
             py::arg("contexts"), py::arg("outcomes"), py::arg("logits"))
        .def_static("uniform", &TabularPolicy::uniform, py::arg("contexts"),
                    py::arg("outcomes"))
        .def_property_readonly("contexts", &TabularPolicy::contexts)
        .def_property_readonly("outcomes", &TabularPolicy::outcomes)
        .def("logit",
             [](const TabularPolicy& p, std::size_t x, std::size_t y) {
                 return p.logit(x, y);
             },
             py::arg("context"), py::arg("outcome"))
        .def("row_probs", &TabularPolicy::row_probs, py::arg("context"))
        .def("prob", &TabularPolicy::prob, py::arg("context"), py::arg("outcome"))
        .def("log_prob", &TabularPolicy::log_prob, py::arg("context"), py::arg("outcome"));

    py::class_<RewardTable>(m, "RewardTable")
        .def(py::init([](std::size_t contexts, std::size_t outcomes,
                         std::vector<double> values) {
                 RewardTable r;
                 r.contexts = contexts;
                 r.outcomes = outcomes;
                 r.values = std::move(values);
                 return r;
             }),
             py::arg("contexts"), py::arg("outcomes"), py::arg("values"))
        .def_readonly("contexts", &RewardTable::contexts)
        .def_readonly("outcomes", &RewardTable::outcomes)
        .def_readonly("values", &RewardTable::values)
        .def("at", &RewardTable::at, py::arg("context"), py::arg("outcome"));

    py::class_<TrainPair>(m, "TrainPair")
        .def(py::init([](std::size_t context, std::size_t chosen, std::size_t rejected,
                         double weight) {
                 return TrainPair{context, chosen, rejected, weight};
             }),
             py::arg("context"), py::arg("chosen"), py::arg("rejected"),
             py::arg("weight") = 1.0)
        .def_readwrite("context", &TrainPair::context)
        .def_readwrite("chosen", &TrainPair::chosen)
        .def_readwrite("rejected", &TrainPair::rejected)
        .def_readwrite("weight", &TrainPair::weight);

    py::class_<DpoConfig>(m, "DpoConfig")
        .def(py::init<>())
        .def_static("full_scale_preset", &DpoConfig::full_scale_preset)
        .def_readwrite("beta", &DpoConfig::beta)
        .def_readwrite("peak_lr", &DpoConfig::peak_lr)
        .def_readwrite("warmup_ratio", &DpoConfig::warmup_ratio)
        .def_readwrite("epochs", &DpoConfig::epochs)
        .def_readwrite("weight_decay", &DpoConfig::weight_decay)
        .def_readwrite("adam_beta1", &DpoConfig::adam_beta1)
        .def_readwrite("adam_beta2", &DpoConfig::adam_beta2)
        .def_readwrite("adam_eps", &DpoConfig::adam_eps)
        .def_readwrite("batch_size", &DpoConfig::batch_size)
        .def_readwrite("eval_every", &DpoConfig::eval_every)
        .def_readwrite("seed", &DpoConfig::seed)
        .def("validate", &DpoConfig::validate);

    py::class_<TrainHistory::Eval>(m, "EvalSnapshot")
        .def_readonly("step", &TrainHistory::Eval::step)
        .def_readonly("train_loss", &TrainHistory::Eval::train_loss)
        .def_readonly("val_loss", &TrainHistory::Eval::val_loss)
        .def_readonly("loss_ratio", &TrainHistory::Eval::loss_ratio)
        .def_readonly("train_margin", &TrainHistory::Eval::train_margin)
        .def_readonly("val_margin", &TrainHistory::Eval::val_margin);

    py::class_<TrainHistory>(m, "TrainHistory")
        .def_readonly("train_loss", &TrainHistory::train_loss)
        .def_readonly("evals", &TrainHistory::evals);

    py::class_<TrainResult>(m, "TrainResult")
        .def_readonly("policy", &TrainResult::policy)
        .def_readonly("history", &TrainResult::history);

    m.def("bt_prob", &bt_prob, py::arg("reward_a"), py::arg("reward_b"),
          "Bradley-Terry probability that outcome a beats outcome b");
    m.def("implicit_reward", &implicit_reward, py::arg("policy"), py::arg("reference"),
          py::arg("context"), py::arg("outcome"), py::arg("beta"));
    m.def("optimal_policy", &optimal_policy, py::arg("reference"), py::arg("reward"),
          py::arg("beta"));
    m.def("dpo_loss", &dpo_loss, py::arg("policy"), py::arg("reference"), py::arg("pair"),
          py::arg("beta"));
    m.def("dpo_grad", &dpo_grad, py::arg("policy"), py::arg("reference"), py::arg("pair"),
          py::arg("beta"));
    m.def("kl_divergence", &kl_divergence, py::arg("policy"), py::arg("reference"),
          py::arg("context"));
    m.def("bt_weighted_pairs", &bt_weighted_pairs, py::arg("reward"));
    m.def(
        "train",
        [](const std::vector<TrainPair>& pairs, const TabularPolicy& reference,
           const DpoConfig& config, const std::vector<TrainPair>& val_pairs) {
            return train(pairs, reference, config, val_pairs);
        },
        py::arg("pairs"), py::arg("reference"), py::arg("config"),
        py::arg("val_pairs") = std::vector<TrainPair>{});
    m.def("preference_accuracy", &preference_accuracy, py::arg("policy"),
          py::arg("reference"), py::arg("pairs"), py::arg("beta"));

    m.def("overall_score",
          [](int helpfulness, int visual_faithfulness, int ethical) {
              OverallScore s = overall_score(helpfulness, visual_faithfulness, ethical);
              return py::make_tuple(s.score_sum, s.mean);
          },
          py::arg("helpfulness"), py::arg("visual_faithfulness"), py::arg("ethical"),
          "Returns (score_sum, mean); each score must be in [1, 5]");

    m.def("cohens_kappa",
          py::overload_cast<const std::vector<std::string>&,
                            const std::vector<std::string>&>(&cohens_kappa),
          py::arg("rater_a"), py::arg("rater_b"));
    m.def("cohens_kappa",
          py::overload_cast<const std::vector<int>&, const std::vector<int>&>(&cohens_kappa),
          py::arg("rater_a"), py::arg("rater_b"));
    m.def("majority_agreement_rate", &majority_agreement_rate, py::arg("votes"),
          py::arg("reference"));
    m.def("estimate_cost", &estimate_cost, py::arg("instructions"),
          py::arg("price_per_aspect_response"));
}
