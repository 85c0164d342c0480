"""Show that the reward prompt alone switches the recommended continuation.

Trains on the balanced conditioning corpus, then scores every test step twice:
once with the mean purchase-tier reward and once with the click-tier reward.
"""

import sys

from prl.experiments import CONDITIONING, conditioning_accuracy, prepare


def main():
    prep = prepare(CONDITIONING)
    high, low = conditioning_accuracy(prep, prep.fit("prl"))
    print(f"high-tier prompt -> purchase continuation: {high:.3f}")
    print(f"low-tier prompt  -> click continuation:    {low:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
