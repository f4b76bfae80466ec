"""
Some experiments need files that are not included with this package (MNIST, full-size profiled bit error maps).

This module governs the building and downloading of such assets.
"""
import os

from filefetcher import AssetCLI, AssetManager

from . import exceptions


# Remote manifest of prebuilt assets; without one, assets are built locally from their recipes
ASSETS_URL_VAR = 'BITFAULT_ASSETS_URL'

# Small column-biased map shipped with the package
BUNDLED_MAP = os.path.join(os.path.dirname(__file__), 'data', 'chip2_like')

_manager = None


def get_manager() -> AssetManager:
    """The manager is created on first use, so importing this module never touches the asset cache"""
    global _manager
    if _manager is None:
        _manager = AssetManager('bitfault', os.environ.get(ASSETS_URL_VAR))
    return _manager


def set_recipes():
    """
    Assets are built in advance, so recipes are only defined when explicitly asked to do so (such as in CLI mode)
    """
    from .loaders.fetch_mnist import FetchMnist
    from .loaders.make_profiled_map import MakeColumnBiasedMap

    manager = get_manager()
    manager.add_recipe(
        'mnist',
        FetchMnist(),
        label='MNIST training and test images in IDX format',
    )
    manager.add_recipe(
        'profiled_map',
        MakeColumnBiasedMap(rows=8192, cols=128),
        label='Synthetic column-biased bit error map, one 8192 x 128 memory array',
        geometry='8192x128',
    )
    manager.add_recipe(
        'profiled_map',
        MakeColumnBiasedMap(rows=64, cols=128),
        label='Synthetic column-biased bit error map, small test array',
        geometry='64x128',
    )


def locate(item_type: str, **tags) -> str:
    """Path of a previously downloaded or built asset"""
    try:
        return get_manager().locate(item_type, **tags)
    except Exception as e:
        raise exceptions.ConfigurationException(
            'Could not locate the {} asset ({}). Build it with `bitfault-assets build --type {}`, or point {} at '
            'a local copy.'.format(item_type, e, item_type, 'BITFAULT_DATA' if item_type == 'mnist' else 'a path'))


def main():
    """
    Main method. Register recipes and run the CLI.
    """
    set_recipes()

    cli = AssetCLI(get_manager())
    cli.run()


if __name__ == '__main__':
    main()
