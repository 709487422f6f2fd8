"""Grid-level health co-benefits of PM2.5 reductions from sectoral
emission cuts, estimated with a residual CNN over gridded inputs."""

__version__ = "0.1.0"
