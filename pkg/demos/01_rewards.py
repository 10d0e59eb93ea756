"""How a completion earns reward.

Scores a handful of hand-written completions against generated samples:
one reasoning block then one answer block earns the format point, and the
answer earns the accuracy point (or a quantized IoU value for boxes).
Run: python demos/01_rewards.py
"""

from fewshot_rlvr.rewards import BBox, iou, quantized_iou_reward, score
from fewshot_rlvr.taskgen import make_sample


def show(sample, text):
    b = score(sample, text)
    print(f"  format={b.format} accuracy={b.accuracy:.3f} total={b.total:.3f}  <- {text!r}")


cls = make_sample("demo-cls", "CLS", 3)
print(f"CLS prompt: {cls.prompt_text!r}")
print(f"truth: {cls.truth}")
show(cls, f"<reasoning>look at the fields</reasoning><answer>{cls.truth}</answer>")
show(cls, f"<answer>{cls.truth}</answer>")
show(cls, "<reasoning>hmm</reasoning><answer>harbor</answer>")
show(cls, f"<answer>{cls.truth}</answer><reasoning>tags in the wrong order</reasoning>")

vg = make_sample("demo-vg", "VG", 8)
t = vg.truth
print(f"\nVG prompt: {vg.prompt_text!r}")
print(f"truth box: {t.to_text()}")
for dy in (0, 20, 60, 120):
    guess = BBox(t.x_min, min(t.y_min + dy, t.y_max), t.x_max, t.y_max)
    v = iou(guess, t)
    print(f"  shift top edge by {dy:>3}: IoU {v:.3f} -> reward {quantized_iou_reward(v):.3f}")
show(vg, f"<reasoning>look</reasoning><answer>{t.to_text()}</answer>")
