"""Cell-based 30-minute convective nowcasting on synthetic 3D storm fields.

Submodules are imported explicitly (stormcast.autodiff, stormcast.synth,
stormcast.pipeline, stormcast.model, stormcast.verification,
stormcast.config, stormcast.cli); the package root stays import-light so
the CLI can cap BLAS threads before numpy loads.
"""

__version__ = "0.1.0"
