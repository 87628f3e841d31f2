#include "pipeline.hpp"

#include <chrono>

namespace cotd::testing {

PipelineResult run_pipeline(const std::vector<Document>& corpus, const TrainConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  PipelineResult r{split_stratified(corpus, SplitSpec{0.7, 0.15, 0.15, config.seed}), {}, {}, {}, 0.0};

  ReasoningIndex reasonings;
  if (config.use_cot) {
    TemplateBackend backend;
    ReasoningCache cache;
    std::vector<GenerationRequest> requests;
    for (const auto& d : r.split.train) requests.push_back({&d, training_label(d)});
    for (const auto* part : {&r.split.val, &r.split.test})
      for (const auto& d : *part) requests.push_back({&d, std::string(kInferenceLabel)});
    const auto report = generate_all(requests, backend, cache);
    if (report.failed != 0) throw Error("template reasoning failed");
    for (const auto& req : requests) {
      auto hit = cache.lookup(ReasoningCache::key(req.doc->text, req.label, backend.id(), backend.template_version()));
      hit->doc_id = req.doc->id;
      reasonings.emplace(std::make_pair(req.doc->id, req.label), *hit);
    }
  }

  auto trained = train(r.split.train, r.split.val, reasonings, config);
  const auto& model = trained.best.model;
  for (const auto& d : r.split.test) {
    const auto it = reasonings.find({d.id, std::string(kInferenceLabel)});
    r.test_predictions.push_back(model.predict(d, it == reasonings.end() ? nullptr : &it->second));
  }
  r.test_report = score(r.test_predictions, r.split.test);
  r.trained = std::move(trained);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace cotd::testing
