# eval package: collapse and alignment metrics
