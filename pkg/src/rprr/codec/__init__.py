"""Lossless depth tiles, progressive wavelet colour and the payload container."""

from .color import decode_color, decode_color_tiles, encode_color, encode_color_tiles
from .container import (ContainerParts, decode_payload, encode_payload, pack_container,
                        unpack_container)
from .depth import decode_depth, encode_depth, image_tiles, tiles_to_image
