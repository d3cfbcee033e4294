"""Translating a word only the image can disambiguate.

In the synthetic corpus the English noun "mark" becomes "rond" or "carre"
depending on the shape in the picture. A text-only model can only guess; a
model whose ResNet is modulated by the sentence reads the shape. Takes about
two minutes.  Run:  python3 demos/05_ambiguous_translation.py [steps]
"""
import sys

from mmtcbn.config import desk_config
from mmtcbn.data import preprocess_image, synth_corpus
from mmtcbn.training import Pipelines, evaluate, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
train_c = synth_corpus(500, seed=1)
dev_c = synth_corpus(200, seed=2, paired=True)   # every sentence once with each shape
cfg = desk_config(max_steps=steps, eval_every=100)
pipes = Pipelines.fit(train_c.src, train_c.tgt, cfg.bpe_merges)
train_data, dev_data = pipes.synth_dataset(train_c), pipes.synth_dataset(dev_c)

# dev_c holds each sentence twice, once per shape
sentence, img_a, img_b = dev_c.src[0], dev_c.images[0], dev_c.images[1]
print(f"source: {sentence!r}  shapes: {dev_c.shapes[0]}, {dev_c.shapes[1]}\n")

for variant in ("text_only", "cbn_pool5"):
    model, result = train(variant, train_data, dev_data, cfg, pipes, seed=0)
    acc = evaluate(model, dev_data, pipes, decode=False)["ambiguous_accuracy"]
    print(f"{variant}: best dev BLEU {result.best_bleu:.3f}, ambiguous-word accuracy {acc:.1%}")
    ids = pipes.src.encode(sentence)
    for img in (img_a, img_b):
        x = None if model.resnet is None else preprocess_image(img, cfg.preprocessing, None,
                                                               cfg.resnet_input_size[:2])
        print("   ", pipes.tgt.decode(model.translate(ids, images=x).tokens))
