// Poison a small synthetic dataset with a BadNets patch, train a model on
// it, and ask the detector which samples carry the trigger.

#include <cstdio>

#include "bsift/bsift.hpp"

int main() {
  using namespace bsift;

  const ImageBatch clean = make_toy_images(1500, /*seed=*/7);
  const ImageBatch test = make_toy_images(300, /*seed=*/8);
  const TriggerSpec trigger = make_badnets_trigger(5, clean.shape(), /*seed=*/1);
  const PoisonedDataset data = poison_dataset(clean, kToyClasses, trigger, 0.1, /*target_label=*/0, /*seed=*/2);

  TrainConfig train;
  train.epochs = 12;
  train.milestones = {8};
  const nn::Network model = train_classifier(data, train);
  std::printf("clean acc %.3f  attack success %.3f\n", evaluate_acc(model, test),
              evaluate_asr(model, test, trigger, data.target_label));

  BilevelConfig detect;
  detect.lambda_l1 = 0.016;
  detect.batch_size = 100;
  const BilevelResult r = run_bilevel(model, data.batch.images, detect);

  const auto labels = as_labels(data.is_backdoor);
  const auto rates = tpr_fpr_at_zero<std::uint8_t>(r.mspc, labels);
  std::printf("flagged %zu of %zu  auroc %.3f  tpr %.3f  fpr %.3f\n", r.w.count(), data.size(),
              auroc<std::uint8_t>(r.mspc.scores, labels), rates.tpr, rates.fpr);
}
