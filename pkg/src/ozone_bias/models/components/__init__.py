from .layers import conv2d, dropout, masked_mse, maxpool2, reflect_pad, relu, upconv2
from .unet import DoubleConv, UNet, double_conv, unet_forward
