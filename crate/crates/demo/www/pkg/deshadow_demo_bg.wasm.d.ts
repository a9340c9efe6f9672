/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const scene_layer: (a: number, b: number, c: number) => [number, number, number, number];
export const scene_metrics: (a: number, b: number) => [number, number, number, number];
export const scene_new: (a: bigint, b: number) => [number, number, number];
export const scene_oracle_gain: (a: number) => number;
export const scene_relit_rgba: (a: number, b: number) => [number, number];
export const scene_size: (a: number) => number;
export const sphere_map: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
