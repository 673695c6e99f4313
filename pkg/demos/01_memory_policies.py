"""Compressed memory policies on synthetic slot data.

A segment compresses into s slots (2 x L x d numbers each). The memory
then either grows by concatenation, stays fixed under a running mean, or
stays fixed under an exponential moving average. This demo shows the
growth laws and the update algebra with small hand-checkable tensors.
"""

import numpy as np

from ccm.memory import (CompressedSlots, ContextMemory, update_concat,
                        update_ema, update_merge)


def slot(value, at):
    arr = np.full((2, 1, 4), float(value))
    return CompressedSlots(arr.copy(), arr.copy(), at)


def main():
    print("=== concat: linear growth, order preserved ===")
    mem = ContextMemory("concat")
    for t in range(1, 6):
        mem = update_concat(mem, slot(t, t))
        print(f"t={t}: entries={mem.entry_count}  "
              f"stamps={[s.produced_at for s in mem.slots]}")

    print("\n=== merge: fixed size, running arithmetic mean ===")
    mem = ContextMemory("merge")
    values = [3.0, 6.0, 9.0, 2.0]
    for t, v in enumerate(values, start=1):
        mem = update_merge(mem, slot(v, t))
        state = mem.running.keys[0, 0, 0]
        print(f"t={t}: entries={mem.entry_count}  state={state:.3f}  "
              f"(mean of {values[:t]} = {np.mean(values[:t]):.3f})")

    print("\n=== ema(a=0.5): recency-weighted, a_1 = 1 ===")
    mem = ContextMemory("ema", ema_a=0.5)
    for t, v in enumerate([4.0, 0.0, 8.0], start=1):
        mem = update_ema(mem, slot(v, t), 0.5)
        print(f"t={t}: state={mem.running.keys[0, 0, 0]:.3f}")
    print("closed form: 0.25*4 + 0.25*0 + 0.5*8 =",
          0.25 * 4 + 0.25 * 0 + 0.5 * 8)


if __name__ == "__main__":
    main()
