import sys

from metricmm.harness.cli import main

sys.exit(main())
